#include "xattn/explainer.hpp"

#include <cmath>

#include "xattn/adam.hpp"
#include "xattn/errors.hpp"
#include "xattn/ops.hpp"
#include "xattn/parallel.hpp"

namespace xattn {

void ExplainHyper::validate() const {
  if (epochs < 1) throw ParameterError("explain: epochs must be >= 1");
  if (!(lr >= 0) || !std::isfinite(lr)) throw ParameterError("explain: lr must be >= 0");
  if (!(alpha >= 0)) throw ParameterError("explain: alpha must be >= 0");
  if (!(beta >= 0)) throw ParameterError("explain: beta must be >= 0");
  if (!(tau > 0)) throw ParameterError("explain: tau must be > 0");
  if (hidden < 0) throw ParameterError("explain: hidden must be >= 0");
}

ExplainerParams ExplainerParams::initialize(std::size_t d_u, std::size_t hidden, RngStream& rng) {
  auto uniform = [&](Tensor& t, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : t.data()) v = (2.0 * rng.uniform() - 1.0) * bound;
  };
  ExplainerParams p{Tensor(d_u, hidden), Tensor(1, hidden), Tensor(1, hidden, 0.25),
                    Tensor(hidden, 1), Tensor(1, 1)};
  uniform(p.w1, d_u);
  uniform(p.b1, d_u);
  uniform(p.w2, hidden);
  uniform(p.b2, hidden);
  return p;
}

ExplainerParams ExplainerParams::from_tensors(std::span<const Tensor> t) {
  if (t.size() != 5) throw ContractError("explainer expects 5 parameter tensors");
  return ExplainerParams{t[0], t[1], t[2], t[3], t[4]};
}

Var explainer_scores(std::span<const Var> params, const Var& prompt) {
  if (params.size() != 5) throw ContractError("explainer expects 5 parameter vars");
  if (prompt.cols() != params[0].rows()) {
    throw ContractError("prompt width " + std::to_string(prompt.cols()) +
                        " does not match explainer input " + std::to_string(params[0].rows()));
  }
  const Var h = ops::prelu(ops::add_row(ops::matmul(prompt, params[0]), params[1]), params[2]);
  return ops::sigmoid(ops::add_row(ops::matmul(h, params[3]), params[4]));
}

Var predict_mask(std::span<const Var> params, const Var& prompt, double tau, const Tensor& noise) {
  const Var scores = ops::reshape(explainer_scores(params, prompt), 1, prompt.rows());
  return ops::gumbel_sigmoid(scores, tau, noise);
}

std::vector<double> predict_mask(const ExplainerParams& params, const Tensor& prompt, double tau) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : params.tensors()) vars.push_back(tape.constant(t));
  const Var m = predict_mask(vars, tape.constant_ref(prompt), tau, Tensor(1, prompt.rows()));
  return {m.value().data().begin(), m.value().data().end()};
}

Tensor sample_gumbel_noise(std::size_t length, RngStream& rng) {
  Tensor noise(1, length);
  for (double& v : noise.data()) {
    const double g1 = rng.gumbel();
    const double g0 = rng.gumbel();
    v = g1 - g0;
  }
  return noise;
}

double loss_factual(std::span<const double> e_orig, std::span<const double> e_fact) {
  return -cosine_similarity(e_orig, e_fact);
}

double loss_counterfactual(std::span<const double> e_orig, std::span<const double> e_cf) {
  return cosine_similarity(e_orig, e_cf);
}

double loss_total(std::span<const double> e_orig, std::span<const double> e_fact,
                  std::span<const double> e_cf, std::span<const double> mask, double alpha,
                  double beta) {
  if (alpha < 0 || beta < 0) throw ParameterError("loss_total: alpha and beta must be >= 0");
  if (mask.empty()) throw ContractError("loss_total: empty mask");
  double l1 = 0, l2 = 0;
  for (double m : mask) {
    l1 += std::abs(m);
    l2 += m * m;
  }
  const double n = static_cast<double>(mask.size());
  return loss_factual(e_orig, e_fact) + loss_counterfactual(e_orig, e_cf) + alpha * (l1 / n) +
         beta * (l2 / n);
}

ObjectiveParts token_objective(const Model& model, std::span<const Var> params,
                               const PromptEmbedding& prompt, const AudioSequence& prefix,
                               const Tensor& e_orig, const ExplainHyper& hyper,
                               const Tensor& noise) {
  if (hyper.alpha < 0 || hyper.beta < 0) {
    throw ParameterError("objective: alpha and beta must be >= 0");
  }
  Tape& tape = *params[0].tape();
  const BoundModel bound = BoundModel::frozen(model, tape);
  const Var u = tape.constant_ref(prompt.rows);
  const Var orig = tape.constant_ref(e_orig);

  ObjectiveParts parts;
  parts.mask = predict_mask(params, u, hyper.tau, noise);
  ForwardOptions fact;
  fact.injection = MaskInjection::factual(parts.mask);
  parts.e_fact = forward_latent(bound, u, prefix, fact).latent;
  ForwardOptions cf;
  cf.injection = MaskInjection::counterfactual(parts.mask);
  parts.e_cf = forward_latent(bound, u, prefix, cf).latent;

  const Var fact_cos = ops::cosine_similarity(orig, parts.e_fact);
  const Var cf_cos = ops::cosine_similarity(orig, parts.e_cf);
  parts.fact_cos = fact_cos.scalar();
  parts.cf_cos = cf_cos.scalar();
  Var total = ops::sub(cf_cos, fact_cos);
  total = ops::add(total, ops::scale(ops::mean(ops::abs(parts.mask)), hyper.alpha));
  total = ops::add(total, ops::scale(ops::mean(ops::square(parts.mask)), hyper.beta));
  parts.total = total;
  return parts;
}

namespace {

struct Evaluated {
  double loss;
  double fact_cos;
  std::vector<double> mask;
};

Evaluated evaluate_deterministic(const Model& model, const std::vector<Tensor>& params,
                                 const PromptEmbedding& prompt, const AudioSequence& prefix,
                                 const Tensor& e_orig, const ExplainHyper& hyper) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : params) vars.push_back(tape.constant_ref(t));
  const ObjectiveParts parts =
      token_objective(model, vars, prompt, prefix, e_orig, hyper, Tensor(1, prompt.length()));
  const auto m = parts.mask.value().data();
  return {parts.total.scalar(), parts.fact_cos, std::vector<double>(m.begin(), m.end())};
}

}  // namespace

TokenExplanation explain_token(const Model& model, const PromptEmbedding& prompt,
                               const AudioSequence& audio, std::size_t t,
                               const ExplainHyper& hyper) {
  hyper.validate();
  if (t < 1 || t > audio.length()) {
    throw ContractError("target step " + std::to_string(t) + " outside [1, " +
                        std::to_string(audio.length()) + "]");
  }
  const std::size_t d_u = prompt.rows.cols();
  const std::size_t hidden = hyper.hidden > 0 ? static_cast<std::size_t>(hyper.hidden) : d_u;
  const AudioSequence prefix = audio.prefix(t - 1);

  RngStream rng(mix_seed(hyper.seed, t));
  std::vector<Tensor> params = ExplainerParams::initialize(d_u, hidden, rng).tensors();
  const Tensor e_orig = forward_values(model, prompt, prefix).latent;

  TokenExplanation out;
  out.t = t;
  const Evaluated initial = evaluate_deterministic(model, params, prompt, prefix, e_orig, hyper);
  out.initial_loss = initial.loss;
  out.initial_fact_cos = initial.fact_cos;

  AdamState adam;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    const Tensor noise = sample_gumbel_noise(prompt.length(), rng);
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& p : params) vars.push_back(tape.parameter(p));
    const ObjectiveParts parts = token_objective(model, vars, prompt, prefix, e_orig, hyper, noise);
    const double loss = parts.total.scalar();
    if (!std::isfinite(loss)) throw OptimizationError("explainer objective is not finite", epoch);
    out.trajectory.push_back(loss);
    if (hyper.lr == 0) continue;
    const Gradients grads = tape.backward(parts.total);
    std::vector<Tensor> g;
    for (const Var& v : vars) g.push_back(grads[v]);
    adam_step(params, g, adam, hyper.lr);
  }

  const Evaluated final = evaluate_deterministic(model, params, prompt, prefix, e_orig, hyper);
  out.final_loss = final.loss;
  out.final_fact_cos = final.fact_cos;
  out.mask = final.mask;
  return out;
}

std::vector<double> aggregate_masks(const Tensor& per_token,
                                    std::optional<std::pair<std::size_t, std::size_t>> interval) {
  std::size_t s = 1, n = per_token.rows();
  if (interval) {
    std::tie(s, n) = *interval;
    if (s < 1 || s > n || n > per_token.rows()) {
      throw ContractError("interval (" + std::to_string(s) + ", " + std::to_string(n) +
                          ") outside [1, " + std::to_string(per_token.rows()) + "]");
    }
  }
  std::vector<double> agg(per_token.cols(), 0.0);
  for (std::size_t t = s - 1; t < n; ++t)
    for (std::size_t l = 0; l < agg.size(); ++l) agg[l] += per_token(t, l);
  for (double& v : agg) v /= static_cast<double>(n - s + 1);
  return agg;
}

ExplanationResult explain_sequence(const Model& model, const PromptEmbedding& prompt,
                                   const AudioSequence& audio, const ExplainHyper& hyper,
                                   std::optional<std::pair<std::size_t, std::size_t>> interval,
                                   int jobs) {
  hyper.validate();
  const std::size_t T = audio.length();
  if (T == 0) throw ContractError("cannot explain an empty audio sequence");
  if (interval && (interval->first < 1 || interval->first > interval->second ||
                   interval->second > T)) {
    throw ContractError("interval (" + std::to_string(interval->first) + ", " +
                        std::to_string(interval->second) + ") outside [1, " + std::to_string(T) +
                        "]");
  }
  ExplanationResult result;
  result.hyper = hyper;
  result.interval = interval;
  result.tokens.resize(T);
  parallel_for(T, jobs, [&](std::size_t i) {
    result.tokens[i] = explain_token(model, prompt, audio, i + 1, hyper);
  });
  result.per_token = Tensor(T, prompt.length());
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t l = 0; l < prompt.length(); ++l) result.per_token(t, l) = result.tokens[t].mask[l];
  result.aggregate = aggregate_masks(result.per_token, interval);
  return result;
}

}  // namespace xattn

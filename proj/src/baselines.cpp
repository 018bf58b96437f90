#include "xattn/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "xattn/errors.hpp"
#include "xattn/ops.hpp"
#include "xattn/rng.hpp"

namespace xattn {
namespace {

void check_step(const AudioSequence& audio, std::size_t t) {
  if (t < 1 || t > audio.length()) {
    throw ContractError("target step " + std::to_string(t) + " outside [1, " +
                        std::to_string(audio.length()) + "]");
  }
}

// Mean over codebooks of the logit assigned to audio[t - 1].
Var target_logit(const ForwardResult& r, const AudioSequence& audio, std::size_t t) {
  Var total;
  for (std::size_t cb = 0; cb < r.logits.size(); ++cb) {
    const int z = audio.codebooks[cb][t - 1];
    const Var v = ops::slice_cols(r.logits[cb], static_cast<std::size_t>(z), 1);
    total = total.valid() ? ops::add(total, v) : v;
  }
  return ops::scale(total, 1.0 / static_cast<double>(r.logits.size()));
}

double target_cross_entropy(const std::vector<Tensor>& logits, const AudioSequence& audio,
                            std::size_t t) {
  double total = 0;
  for (std::size_t cb = 0; cb < logits.size(); ++cb) {
    const auto row = logits[cb].data();
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0;
    for (double v : row) z += std::exp(v - mx);
    total += mx + std::log(z) - row[audio.codebooks[cb][t - 1]];
  }
  return total;
}

}  // namespace

std::vector<double> max_scale(std::vector<double> v) {
  const double mx = v.empty() ? 0 : *std::max_element(v.begin(), v.end());
  for (double& x : v) x = mx > 0 ? x / mx : 0.0;
  return v;
}

std::vector<double> minmax_scale(std::vector<double> v) {
  if (v.empty()) return v;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, range = *hi - *lo;
  for (double& x : v) x = range > 0 ? (x - a) / range : 0.0;
  return v;
}

std::vector<double> random_mask(std::size_t length, std::uint64_t seed) {
  if (length < 1) throw ContractError("random_mask: length must be >= 1");
  RngStream rng(seed);
  std::vector<double> m(length);
  for (double& v : m) v = rng.uniform();
  return m;
}

AttentionGrads attention_gradients(const Model& model, const PromptEmbedding& prompt,
                                   const AudioSequence& audio, std::size_t t) {
  check_step(audio, t);
  Tape tape;
  const BoundModel bound = BoundModel::frozen(model, tape);
  const Var u = tape.constant_ref(prompt.rows);
  ForwardOptions options;
  options.capture_attention = true;
  options.capture_latent = true;
  const ForwardResult r = forward_latent(bound, u, audio.prefix(t - 1), options);
  const Var y = target_logit(r, audio, t);

  AttentionGrads out;
  out.latent = r.latent.value();
  auto values = [](const std::vector<std::vector<Var>>& maps) {
    std::vector<std::vector<Tensor>> v(maps.size());
    for (std::size_t l = 0; l < maps.size(); ++l)
      for (const Var& m : maps[l]) v[l].push_back(m.value());
    return v;
  };
  out.self_maps = values(r.self_attention);
  out.cross_maps = values(r.cross_attention);

  const Gradients g = tape.backward(y);
  auto grads = [&](const std::vector<std::vector<Var>>& maps) {
    std::vector<std::vector<Tensor>> v(maps.size());
    for (std::size_t l = 0; l < maps.size(); ++l)
      for (const Var& m : maps[l]) v[l].push_back(g[m]);
    return v;
  };
  out.self_grads = grads(r.self_attention);
  out.cross_grads = grads(r.cross_attention);
  const Tensor probe = g[r.latent_probe];
  out.latent_grad = Tensor::row_vector(probe.row(probe.rows() - 1));
  return out;
}

Tensor positive_grad_map(const std::vector<Tensor>& maps, const std::vector<Tensor>& grads) {
  if (maps.empty() || maps.size() != grads.size()) {
    throw ContractError("attention maps and gradients do not align");
  }
  Tensor out(maps[0].rows(), maps[0].cols());
  for (std::size_t h = 0; h < maps.size(); ++h)
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] += std::max(0.0, grads[h][i] * maps[h][i]);
  for (double& v : out.data()) v /= static_cast<double>(maps.size());
  return out;
}

AttributionVector gradcam_e(const Model& model, const PromptEmbedding& prompt,
                            const AudioSequence& audio, std::size_t t,
                            const GradCamOptions& options) {
  const AttentionGrads ag = attention_gradients(model, prompt, audio, t);
  const std::size_t last = ag.cross_maps.size() - 1;
  const Tensor e = positive_grad_map(ag.cross_maps[last], ag.cross_grads[last]);
  std::vector<double> scores(e.cols(), 0.0);
  const std::size_t first_row = options.last_row_only ? e.rows() - 1 : 0;
  for (std::size_t i = first_row; i < e.rows(); ++i)
    for (std::size_t j = 0; j < e.cols(); ++j) scores[j] += e(i, j);
  for (double& s : scores) s /= static_cast<double>(e.rows() - first_row);
  return {max_scale(std::move(scores)), Normalization::max};
}

Tensor cross_token_contributions(const Model& model, const PromptEmbedding& prompt,
                                 const std::vector<Tensor>& last_layer_maps) {
  const ModelConfig& c = model.config();
  const Model::LayerIndex& li = model.index().layers.back();
  const Tensor& wv = model.parameters()[li.cross_v];
  const Tensor& wo = model.parameters()[li.cross_o];
  const std::size_t L = prompt.length(), dk = c.d_head, d = c.d_model;
  Tensor out(L, d);
  for (int h = 0; h < c.n_heads; ++h) {
    const Tensor& a = last_layer_maps[h];
    const std::size_t last = a.rows() - 1;
    for (std::size_t j = 0; j < L; ++j) {
      // v = u_j W_v[:, head], then v W_o[head rows, :]
      std::vector<double> v(dk, 0.0);
      for (std::size_t k = 0; k < prompt.rows.cols(); ++k)
        for (std::size_t q = 0; q < dk; ++q) v[q] += prompt.rows(j, k) * wv(k, h * dk + q);
      for (std::size_t q = 0; q < dk; ++q)
        for (std::size_t o = 0; o < d; ++o) out(j, o) += a(last, j) * v[q] * wo(h * dk + q, o);
    }
  }
  return out;
}

AttributionVector gradcam_a(const Model& model, const PromptEmbedding& prompt,
                            const AudioSequence& audio, std::size_t t) {
  const AttentionGrads ag = attention_gradients(model, prompt, audio, t);
  const Tensor contrib = cross_token_contributions(model, prompt, ag.cross_maps.back());
  std::vector<double> scores(prompt.length(), 0.0);
  for (std::size_t j = 0; j < scores.size(); ++j) {
    double s = 0;
    for (std::size_t ch = 0; ch < contrib.cols(); ++ch) s += ag.latent_grad[ch] * contrib(j, ch);
    scores[j] = std::max(0.0, s / static_cast<double>(contrib.cols()));
  }
  return {max_scale(std::move(scores)), Normalization::max};
}

std::vector<double> atman_raw(const Model& model, const PromptEmbedding& prompt,
                              const AudioSequence& audio, std::size_t t, double k) {
  check_step(audio, t);
  if (!(k >= 0 && k <= 1)) throw ParameterError("atman: k must lie in [0, 1]");
  const AudioSequence prefix = audio.prefix(t - 1);
  const std::size_t L = prompt.length();
  auto cross_entropy = [&](const std::vector<double>& factors) {
    Tape tape;
    const BoundModel bound = BoundModel::frozen(model, tape);
    ForwardOptions options;
    options.pre_softmax_column_scale = factors;
    const ForwardResult r = forward_latent(bound, tape.constant_ref(prompt.rows), prefix, options);
    std::vector<Tensor> logits;
    for (const Var& v : r.logits) logits.push_back(v.value());
    return target_cross_entropy(logits, audio, t);
  };
  const double base = cross_entropy(std::vector<double>(L, 1.0));
  std::vector<double> scores(L);
  for (std::size_t j = 0; j < L; ++j) {
    std::vector<double> factors(L, 1.0);
    factors[j] = 1.0 - k;
    scores[j] = cross_entropy(factors) - base;
  }
  return scores;
}

AttributionVector atman(const Model& model, const PromptEmbedding& prompt,
                        const AudioSequence& audio, std::size_t t, double k) {
  return {minmax_scale(atman_raw(model, prompt, audio, t, k)), Normalization::minmax};
}

namespace {

// Rows of (R - I) normalized to sum to one, then I added back.
Tensor normalize_residual(const Tensor& r) {
  Tensor out = r;
  for (std::size_t i = 0; i < r.rows(); ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < r.cols(); ++j) {
      out(i, j) -= (i == j);
      sum += out(i, j);
    }
    for (std::size_t j = 0; j < r.cols(); ++j) {
      out(i, j) = (sum != 0 ? out(i, j) / sum : 0.0) + (i == j);
    }
  }
  return out;
}

Tensor dense_matmul(const Tensor& a, const Tensor& b, bool transpose_a = false) {
  const std::size_t n = transpose_a ? a.cols() : a.rows();
  const std::size_t inner = transpose_a ? a.rows() : a.cols();
  Tensor out(n, b.cols());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = transpose_a ? a(k, i) : a(i, k);
      if (aik == 0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

}  // namespace

AttributionVector chefer(const Model& model, const PromptEmbedding& prompt,
                         const AudioSequence& audio, std::size_t t) {
  const AttentionGrads ag = attention_gradients(model, prompt, audio, t);
  const std::size_t steps = t, L = prompt.length();
  Tensor r_audio = Tensor::identity(steps);
  Tensor r_text(steps, L);
  for (std::size_t l = 0; l < ag.cross_maps.size(); ++l) {
    const Tensor es = positive_grad_map(ag.self_maps[l], ag.self_grads[l]);
    r_audio += dense_matmul(es, r_audio);
    r_text += dense_matmul(es, r_text);
    // Text-side relevance is the identity, so its normalized form is too.
    const Tensor ec = positive_grad_map(ag.cross_maps[l], ag.cross_grads[l]);
    r_text += dense_matmul(normalize_residual(r_audio), ec, /*transpose_a=*/true);
  }
  std::vector<double> scores(r_text.row(steps - 1).begin(), r_text.row(steps - 1).end());
  return {max_scale(std::move(scores)), Normalization::max};
}

const std::vector<std::string>& baseline_methods() {
  static const std::vector<std::string> names = {"random", "gradcam_e", "gradcam_a", "atman",
                                                 "chefer"};
  return names;
}

Tensor baseline_masks(const std::string& method, const Model& model,
                      const PromptEmbedding& prompt, const AudioSequence& audio,
                      std::uint64_t seed) {
  const std::size_t T = audio.length(), L = prompt.length();
  if (T == 0) throw ContractError("baseline masks need a nonempty audio sequence");
  Tensor out(T, L);
  for (std::size_t t = 1; t <= T; ++t) {
    std::vector<double> row;
    if (method == "random") {
      row = random_mask(L, mix_seed(seed, t));
    } else if (method == "gradcam_e") {
      row = gradcam_e(model, prompt, audio, t).scores;
    } else if (method == "gradcam_a") {
      row = gradcam_a(model, prompt, audio, t).scores;
    } else if (method == "atman") {
      row = atman(model, prompt, audio, t).scores;
    } else if (method == "chefer") {
      row = chefer(model, prompt, audio, t).scores;
    } else {
      throw ConfigError("unknown attribution method '" + method + "'");
    }
    for (std::size_t l = 0; l < L; ++l) out(t - 1, l) = row[l];
  }
  return out;
}

}  // namespace xattn

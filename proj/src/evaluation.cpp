#include "xattn/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>

#include "xattn/errors.hpp"
#include "xattn/parallel.hpp"
#include "xattn/rng.hpp"

namespace xattn {

std::vector<double> ConceptClassifier::classify(const AudioSequence& audio) const {
  if (audio.length() == 0) throw ContractError("classify: empty audio sequence");
  std::vector<double> hist(n_classes(), eps);
  double total = eps * static_cast<double>(n_classes());
  for (const auto& cb : audio.codebooks) {
    for (int id : cb) {
      const int c = spec.concept_of_audio(id);
      hist[c >= 0 ? static_cast<std::size_t>(c) : n_classes() - 1] += 1.0;
      total += 1.0;
    }
  }
  for (double& h : hist) h /= total;
  return hist;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("kl_divergence: length mismatch");
  double kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0) kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(0.0, kl);
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

namespace {

std::mutex& counts_mutex() {
  static std::mutex m;
  return m;
}
std::map<std::string, long>& counts() {
  static std::map<std::string, long> c;
  return c;
}

}  // namespace

std::map<std::string, long> injection_path_counts() {
  std::lock_guard lock(counts_mutex());
  return counts();
}

void reset_injection_path_counts() {
  std::lock_guard lock(counts_mutex());
  counts().clear();
}

namespace {

AudioSequence regenerate_counted(const Model& model, const PromptEmbedding& prompt,
                                 const Tensor& masks, InjectionMode mode,
                                 const SamplingConfig& sampling, const std::string& label) {
  {
    std::lock_guard lock(counts_mutex());
    ++counts()[label];
  }
  const StepMasks schedule{mode, mode == InjectionMode::none ? nullptr : &masks};
  return generate(model, prompt, static_cast<int>(masks.rows()), sampling, schedule).audio;
}

}  // namespace

AudioSequence regenerate_with_injection(const Model& model, const PromptEmbedding& prompt,
                                        const Tensor& masks, InjectionMode mode,
                                        const SamplingConfig& sampling) {
  return regenerate_counted(model, prompt, masks, mode, sampling, "");
}

std::uint64_t regeneration_seed(const EvalSettings& settings, std::size_t prompt, int k,
                                std::uint64_t original_seed) {
  if (settings.same_seed) return original_seed;
  return mix_seed(mix_seed(settings.seed, prompt), static_cast<std::uint64_t>(k));
}

CellScores injection_scores(const Model& model, const ConceptClassifier& classifier,
                            std::span<const EvalItem> items, InjectionMode direction,
                            const EvalSettings& settings, const std::string& label) {
  if (items.empty()) throw ContractError("evaluation needs at least one prompt");
  if (settings.n_seeds < 1) throw ParameterError("evaluation: n_seeds must be >= 1");
  const std::size_t n = items.size(), s = static_cast<std::size_t>(settings.n_seeds);
  CellScores out{std::vector<std::vector<double>>(n, std::vector<double>(s)),
                 std::vector<std::vector<double>>(n, std::vector<double>(s))};
  parallel_for(n * s, settings.jobs, [&](std::size_t cell) {
    const std::size_t i = cell / s;
    const int k = static_cast<int>(cell % s);
    const EvalItem& item = items[i];
    if (item.masks.rows() != item.original.length() || item.masks.cols() != item.prompt.size()) {
      throw ContractError("masks of prompt " + std::to_string(i) + " do not match T x L");
    }
    const PromptEmbedding u = encode_text(model, item.prompt);
    const SamplingConfig sampling{settings.top_k, settings.temperature,
                                  regeneration_seed(settings, i, k, item.original_seed)};
    const AudioSequence z = regenerate_counted(model, u, item.masks, direction, sampling, label);
    const std::vector<double> p = classifier.classify(item.original);
    const std::vector<double> q = classifier.classify(z);
    const std::size_t y = argmax(p);
    out.fid[i][k] = p[y] - q[y];
    out.kl[i][k] = kl_divergence(p, q);
  });
  return out;
}

double cell_mean(const std::vector<std::vector<double>>& cells) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& row : cells) {
    for (double v : row) total += v;
    n += row.size();
  }
  if (n == 0) throw ContractError("mean of an empty cell table");
  return total / static_cast<double>(n);
}

double cell_stderr(const std::vector<std::vector<double>>& cells) {
  const double mu = cell_mean(cells);
  double ss = 0;
  std::size_t n = 0;
  for (const auto& row : cells) {
    for (double v : row) ss += (v - mu) * (v - mu);
    n += row.size();
  }
  if (n < 2) return 0;
  return std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
}

double fidelity(const Model& model, const ConceptClassifier& classifier,
                std::span<const EvalItem> items, InjectionMode direction,
                const EvalSettings& settings) {
  return cell_mean(injection_scores(model, classifier, items, direction, settings).fid);
}

double kl_metric(const Model& model, const ConceptClassifier& classifier,
                 std::span<const EvalItem> items, InjectionMode direction,
                 const EvalSettings& settings) {
  return cell_mean(injection_scores(model, classifier, items, direction, settings).kl);
}

double size_metric(std::span<const Tensor> masks) {
  double total = 0;
  std::size_t n = 0;
  for (const Tensor& m : masks) {
    for (double v : m.data()) total += v;
    n += m.size();
  }
  if (n == 0) throw ContractError("size_metric: no mask entries");
  return total / static_cast<double>(n);
}

EvalReport evaluate_masks(const std::string& method, const Model& model,
                          const ConceptClassifier& classifier, std::span<const EvalItem> items,
                          const EvalSettings& settings) {
  const auto start = std::chrono::steady_clock::now();
  EvalReport r;
  r.method = method;
  r.n_prompts = static_cast<int>(items.size());
  r.n_seeds = settings.n_seeds;
  r.factual = injection_scores(model, classifier, items, InjectionMode::factual, settings, method);
  r.counterfactual =
      injection_scores(model, classifier, items, InjectionMode::counterfactual, settings, method);
  r.fid_f = {cell_mean(r.factual.fid), cell_stderr(r.factual.fid)};
  r.kl_f = {cell_mean(r.factual.kl), cell_stderr(r.factual.kl)};
  r.fid_cf = {cell_mean(r.counterfactual.fid), cell_stderr(r.counterfactual.fid)};
  r.kl_cf = {cell_mean(r.counterfactual.kl), cell_stderr(r.counterfactual.kl)};
  std::vector<std::vector<double>> sizes;
  for (const EvalItem& item : items) {
    const Tensor* m = &item.masks;
    sizes.push_back({size_metric(std::span<const Tensor>(m, 1))});
  }
  r.size = {cell_mean(sizes), cell_stderr(sizes)};
  r.runtime_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

VarianceBaseline audio_variance_baseline(const Model& model, const ConceptClassifier& classifier,
                                         std::span<const std::vector<int>> prompts, int n,
                                         int length, const EvalSettings& settings) {
  if (n < 2) throw ParameterError("audio_variance_baseline: N must be >= 2");
  if (prompts.empty()) throw ContractError("audio_variance_baseline: no prompts");
  EvalSettings fresh = settings;
  fresh.same_seed = false;
  double fid = 0, kl = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const PromptEmbedding u = encode_text(model, prompts[i]);
    std::vector<std::vector<double>> dists;
    for (int k = 0; k < n; ++k) {
      const SamplingConfig sampling{settings.top_k, settings.temperature,
                                    regeneration_seed(fresh, i, k)};
      dists.push_back(classifier.classify(generate(model, u, length, sampling).audio));
    }
    const std::size_t y = argmax(dists[0]);
    for (int k = 1; k < n; ++k) {
      fid += dists[0][y] - dists[k][y];
      kl += kl_divergence(dists[0], dists[k]);
    }
  }
  const double cells = static_cast<double>(prompts.size()) * (n - 1);
  return {fid / cells, kl / cells};
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("spearman: length mismatch");
  if (a.size() < 2) return std::nullopt;
  const std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

SanityReport sanity_check(const Model& model, const AggregateFn& explain,
                          std::span<const std::vector<int>> prompts,
                          std::span<const AudioSequence> audio, std::uint64_t seed) {
  if (prompts.size() != audio.size()) throw ContractError("sanity_check: prompts and audio differ");
  const Model randomized = model.with_randomized_decoder(seed);
  SanityReport r;
  double abs_sum = 0, var_sum = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const PromptEmbedding u = encode_text(model, prompts[i]);
    const std::vector<double> trained = explain(model, u, audio[i], i);
    const std::vector<double> random = explain(randomized, u, audio[i], i);
    const auto rho = spearman(trained, random);
    r.correlations.push_back(rho);
    if (rho) {
      abs_sum += std::abs(*rho);
    } else {
      ++r.degenerate;
    }
    const double mu = std::accumulate(random.begin(), random.end(), 0.0) / random.size();
    double var = 0;
    for (double v : random) var += (v - mu) * (v - mu);
    var_sum += var / random.size();
  }
  const int valid = static_cast<int>(prompts.size()) - r.degenerate;
  r.mean_abs_correlation = valid > 0 ? abs_sum / valid : 0.0;
  r.randomized_mask_variance = prompts.empty() ? 0.0 : var_sum / prompts.size();
  return r;
}

std::vector<TokenImportance> corpus_importance(std::span<const std::vector<int>> prompts,
                                               std::span<const std::vector<double>> aggregates,
                                               int min_count) {
  if (prompts.size() != aggregates.size() || prompts.empty()) {
    throw ContractError("corpus_importance: need one aggregate per prompt");
  }
  std::map<int, std::pair<double, int>> acc;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i].size() != aggregates[i].size()) {
      throw ContractError("corpus_importance: aggregate length differs from prompt");
    }
    for (std::size_t l = 0; l < prompts[i].size(); ++l) {
      auto& [sum, count] = acc[prompts[i][l]];
      sum += aggregates[i][l];
      ++count;
    }
  }
  std::vector<TokenImportance> out;
  for (const auto& [token, sc] : acc) {
    if (sc.second >= min_count) out.push_back({token, sc.first / sc.second, sc.second});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const TokenImportance& a, const TokenImportance& b) { return a.mean > b.mean; });
  return out;
}

std::optional<double> roc_auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw DimensionError("roc_auc: length mismatch");
  double wins = 0;
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] > 0.5) {
      ++pos;
      for (std::size_t j = 0; j < scores.size(); ++j) {
        if (labels[j] > 0.5) continue;
        wins += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
      }
    } else {
      ++neg;
    }
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return wins / static_cast<double>(pos * neg);
}

AucSummary relevance_auc(const Tensor& scores, const Tensor& labels) {
  if (!scores.same_shape(labels)) throw DimensionError("relevance_auc: shape mismatch");
  AucSummary s;
  double total = 0;
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    const auto auc = roc_auc(scores.row(r), labels.row(r));
    s.values.push_back(auc);
    if (auc) {
      total += *auc;
    } else {
      ++s.skipped;
    }
  }
  const int valid = static_cast<int>(scores.rows()) - s.skipped;
  s.mean = valid > 0 ? total / valid : 0.0;
  return s;
}

PlantedRelevance planted_relevance(const ToyTaskSpec& spec,
                                   std::span<const std::vector<int>> prompts,
                                   std::span<const AudioSequence> audio,
                                   std::span<const Tensor> per_token) {
  if (prompts.size() != audio.size() || prompts.size() != per_token.size()) {
    throw ContractError("planted_relevance: prompts, audio and masks differ in count");
  }
  PlantedRelevance r;
  double auc_sum = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const std::vector<int>& prompt = prompts[i];
    const Tensor labels = relevance_labels(spec, prompt, audio[i]);
    std::vector<double> heard(prompt.size(), 0.0);
    for (std::size_t t = 0; t < labels.rows(); ++t)
      for (std::size_t l = 0; l < prompt.size(); ++l) heard[l] = std::max(heard[l], labels(t, l));
    const std::vector<double> agg = aggregate_masks(per_token[i]);
    if (const auto auc = roc_auc(agg, heard)) {
      auc_sum += *auc;
      ++r.aggregate_scored;
    }

    if (prompt_concepts(spec, prompt).size() < 2) continue;
    const std::size_t T = audio[i].length(), seg = static_cast<std::size_t>(spec.segment_length);
    for (std::size_t from = 1; from <= T; from += seg) {
      const std::size_t to = std::min(T, from + seg - 1);
      std::vector<int> votes(spec.n_concepts, 0);
      for (std::size_t t = from; t <= to; ++t) {
        const int c = spec.concept_of_audio(audio[i].codebooks[0][t - 1]);
        if (c >= 0) ++votes[c];
      }
      const int active =
          static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
      const auto pos = std::find(prompt.begin(), prompt.end(), active);
      if (votes[active] == 0 || pos == prompt.end()) continue;
      const std::vector<double> window = aggregate_masks(per_token[i], std::make_pair(from, to));
      const std::size_t a = static_cast<std::size_t>(pos - prompt.begin());
      bool first = true;
      for (std::size_t l = 0; l < prompt.size(); ++l) {
        if (l != a && spec.is_concept_token(prompt[l]) && window[l] >= window[a]) first = false;
      }
      ++r.segments;
      r.segments_ranked_first += first;
    }
  }
  r.aggregate_auc = r.aggregate_scored > 0 ? auc_sum / r.aggregate_scored : 0.0;
  return r;
}

std::vector<SweepCell> sweep(const Model& model, const ConceptClassifier& classifier,
                             std::span<const EvalItem> items, std::span<const double> alphas,
                             std::span<const double> betas, const ExplainHyper& base,
                             const EvalSettings& settings) {
  if (alphas.empty() || betas.empty()) throw ContractError("sweep: grid is empty");
  std::vector<SweepCell> cells;
  for (double a : alphas) {
    for (double b : betas) {
      ExplainHyper hyper = base;
      hyper.alpha = a;
      hyper.beta = b;
      std::vector<EvalItem> explained(items.begin(), items.end());
      std::vector<Tensor> masks;
      for (EvalItem& item : explained) {
        const PromptEmbedding u = encode_text(model, item.prompt);
        item.masks = explain_sequence(model, u, item.original, hyper, {}, settings.jobs).per_token;
        masks.push_back(item.masks);
      }
      const double fid =
          cell_mean(injection_scores(model, classifier, explained, InjectionMode::factual, settings,
                                     "audiogenx")
                        .fid);
      cells.push_back({a, b, fid, size_metric(masks)});
    }
  }
  return cells;
}

std::string sweep_csv(std::span<const SweepCell> cells, const std::string& config_hash,
                      std::uint64_t seed) {
  std::string out = "alpha,beta,fid_f,size,config_hash,seed\n";
  char buf[200];
  for (const SweepCell& c : cells) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,", c.alpha, c.beta, c.fid_f, c.size);
    out += buf + config_hash + "," + std::to_string(seed) + "\n";
  }
  return out;
}

SignTest sign_test(std::span<const double> differences) {
  SignTest s;
  for (double d : differences) {
    if (d > 0) {
      ++s.wins;
    } else if (d < 0) {
      ++s.losses;
    } else {
      ++s.ties;
    }
  }
  const int n = s.wins + s.losses;
  if (n == 0) return s;
  double p = 0;
  for (int k = s.wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) -
                  n * std::log(2.0));
  }
  s.p_value = std::min(1.0, p);
  return s;
}

}  // namespace xattn

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xattn/explainer.hpp"
#include "xattn/model.hpp"
#include "xattn/toy_task.hpp"

namespace xattn {

// Histogram classifier over the planted concept ranges, with a final
// background bucket for ids outside every range. Stands in for a pretrained
// audio classifier.
struct ConceptClassifier {
  ToyTaskSpec spec;
  double eps = 1e-3;

  std::size_t n_classes() const { return static_cast<std::size_t>(spec.n_concepts) + 1; }
  // Counts every codebook; each bucket gets +eps before normalizing.
  std::vector<double> classify(const AudioSequence& audio) const;
};

double kl_divergence(std::span<const double> p, std::span<const double> q);
std::size_t argmax(std::span<const double> v);

// Generation with a per-step injection schedule (row t of masks drives step
// t). Every method's Fid/KL regeneration goes through here.
AudioSequence regenerate_with_injection(const Model& model, const PromptEmbedding& prompt,
                                        const Tensor& masks, InjectionMode mode,
                                        const SamplingConfig& sampling);

// Number of regenerate_with_injection calls per label since the last reset.
std::map<std::string, long> injection_path_counts();
void reset_injection_path_counts();

struct EvalItem {
  std::vector<int> prompt;
  AudioSequence original;  // Z_i, generated from the prompt
  Tensor masks;            // T x L, row t used while generating step t
  std::uint64_t original_seed = 0;  // sampling seed that produced `original`
};

struct EvalSettings {
  int n_seeds = 5;
  int top_k = 8;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  // Reuse each item's original_seed for every regeneration instead of fresh
  // seeds.
  bool same_seed = false;
  int jobs = 1;
};

// Seed of regeneration k for prompt i; shared by every method so cells pair.
std::uint64_t regeneration_seed(const EvalSettings& settings, std::size_t prompt, int k,
                                std::uint64_t original_seed = 0);

// Per-cell scores, [prompt][seed].
struct CellScores {
  std::vector<std::vector<double>> fid;
  std::vector<std::vector<double>> kl;
};

CellScores injection_scores(const Model& model, const ConceptClassifier& classifier,
                            std::span<const EvalItem> items, InjectionMode direction,
                            const EvalSettings& settings, const std::string& label = "");

double cell_mean(const std::vector<std::vector<double>>& cells);
double cell_stderr(const std::vector<std::vector<double>>& cells);

double fidelity(const Model& model, const ConceptClassifier& classifier,
                std::span<const EvalItem> items, InjectionMode direction,
                const EvalSettings& settings);
double kl_metric(const Model& model, const ConceptClassifier& classifier,
                 std::span<const EvalItem> items, InjectionMode direction,
                 const EvalSettings& settings);

// Mean of every entry of every mask.
double size_metric(std::span<const Tensor> masks);

struct MetricSummary {
  double mean = 0;
  double stderr_ = 0;
};

struct EvalReport {
  std::string method;
  double alpha = 0, beta = 0;
  int n_prompts = 0, n_seeds = 0;
  MetricSummary fid_f, fid_cf, kl_f, kl_cf, size;
  CellScores factual, counterfactual;
  double runtime_s = 0;
};

EvalReport evaluate_masks(const std::string& method, const Model& model,
                          const ConceptClassifier& classifier, std::span<const EvalItem> items,
                          const EvalSettings& settings);

struct VarianceBaseline {
  double fid = 0;
  double kl = 0;
};
// Regenerates each prompt n times without injection and scores generations
// 2..n against the first.
VarianceBaseline audio_variance_baseline(const Model& model, const ConceptClassifier& classifier,
                                         std::span<const std::vector<int>> prompts, int n,
                                         int length, const EvalSettings& settings);

// Average ranks (ties share their mean rank).
std::vector<double> average_ranks(std::span<const double> v);
// Empty when either input has zero variance.
std::optional<double> spearman(std::span<const double> a, std::span<const double> b);

using AggregateFn = std::function<std::vector<double>(const Model&, const PromptEmbedding&,
                                                      const AudioSequence&, std::size_t index)>;

struct SanityReport {
  std::vector<std::optional<double>> correlations;  // per prompt; empty = degenerate
  double mean_abs_correlation = 0;                  // over non-degenerate prompts
  int degenerate = 0;
  double randomized_mask_variance = 0;
};

// Explains each (prompt, audio) pair with the trained model and with a copy
// whose decoder is re-initialized from `seed`, and correlates the aggregates.
SanityReport sanity_check(const Model& model, const AggregateFn& explain,
                          std::span<const std::vector<int>> prompts,
                          std::span<const AudioSequence> audio, std::uint64_t seed);

struct TokenImportance {
  int token = 0;
  double mean = 0;
  int count = 0;
};
// Groups aggregate-mask values by token id, keeps tokens seen at least
// min_count times, sorted by mean descending (ties by token id).
std::vector<TokenImportance> corpus_importance(std::span<const std::vector<int>> prompts,
                                               std::span<const std::vector<double>> aggregates,
                                               int min_count = 10);

// ROC-AUC with ties counted as one half; empty when labels are one-class.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const double> labels);

struct AucSummary {
  std::vector<std::optional<double>> values;
  double mean = 0;
  int skipped = 0;
};
// One AUC per row of scores against the matching row of labels.
AucSummary relevance_auc(const Tensor& scores, const Tensor& labels);

struct PlantedRelevance {
  // Aggregate masks against "token is a concept heard in the audio".
  double aggregate_auc = 0;
  int aggregate_scored = 0;
  // Segments (segment_length windows) of prompts with two or more concepts
  // whose interval aggregate puts the segment's majority concept strictly
  // above every other concept token.
  int segments = 0;
  int segments_ranked_first = 0;
  double segment_rate() const {
    return segments > 0 ? static_cast<double>(segments_ranked_first) / segments : 0.0;
  }
};
PlantedRelevance planted_relevance(const ToyTaskSpec& spec,
                                   std::span<const std::vector<int>> prompts,
                                   std::span<const AudioSequence> audio,
                                   std::span<const Tensor> per_token);

struct SweepCell {
  double alpha = 0, beta = 0;
  double fid_f = 0, size = 0;
};
// Explains every item's audio under each (alpha, beta) and scores the
// resulting masks. Items' masks are ignored; originals and prompts are used.
std::vector<SweepCell> sweep(const Model& model, const ConceptClassifier& classifier,
                             std::span<const EvalItem> items, std::span<const double> alphas,
                             std::span<const double> betas, const ExplainHyper& base,
                             const EvalSettings& settings);
// Header alpha,beta,fid_f,size,config_hash,seed.
std::string sweep_csv(std::span<const SweepCell> cells, const std::string& config_hash,
                      std::uint64_t seed);

// One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
// Ties are dropped.
struct SignTest {
  int wins = 0, losses = 0, ties = 0;
  double p_value = 1;
};
SignTest sign_test(std::span<const double> differences);

}  // namespace xattn

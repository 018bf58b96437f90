#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "xattn/model.hpp"
#include "xattn/rng.hpp"
#include "xattn/tape.hpp"

namespace xattn {

struct ExplainHyper {
  int epochs = 50;
  double lr = 1e-3;  // 0 freezes the explainer (no update is taken)
  double alpha = 1e-3;
  double beta = 0.1;
  double tau = 1.0;
  int hidden = 0;  // explainer width; 0 means d_u
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const ExplainHyper&, const ExplainHyper&) = default;
};

// Per-row mask network: sigmoid(W2 . prelu(W1 u + b1) + b2), then a
// Gumbel-sigmoid head.
struct ExplainerParams {
  Tensor w1;     // d_u x h
  Tensor b1;     // 1 x h
  Tensor slope;  // 1 x h, PReLU
  Tensor w2;     // h x 1
  Tensor b2;     // 1 x 1

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, slope 0.25.
  static ExplainerParams initialize(std::size_t d_u, std::size_t hidden, RngStream& rng);
  std::vector<Tensor> tensors() const { return {w1, b1, slope, w2, b2}; }
  static ExplainerParams from_tensors(std::span<const Tensor> t);
};

// Raw sigmoid scores (before the Gumbel head), L x 1.
Var explainer_scores(std::span<const Var> params, const Var& prompt);
// Mask as a 1 x L var. noise is 1 x L (g1 - g0 per token); zeros select the
// deterministic relaxation.
Var predict_mask(std::span<const Var> params, const Var& prompt, double tau, const Tensor& noise);
// Untracked deterministic readout.
std::vector<double> predict_mask(const ExplainerParams& params, const Tensor& prompt, double tau);
// One Gumbel difference g1 - g0 per token.
Tensor sample_gumbel_noise(std::size_t length, RngStream& rng);

double loss_factual(std::span<const double> e_orig, std::span<const double> e_fact);
double loss_counterfactual(std::span<const double> e_orig, std::span<const double> e_cf);
double loss_total(std::span<const double> e_orig, std::span<const double> e_fact,
                  std::span<const double> e_cf, std::span<const double> mask, double alpha,
                  double beta);

struct ObjectiveParts {
  Var total;
  Var mask;
  Var e_fact;
  Var e_cf;
  double fact_cos = 0;
  double cf_cos = 0;
};

// Builds the full objective on the tape of `params`: factual and
// counterfactual forwards with the mask injected into every cross-attention
// layer, plus the L1/L2 regularizers.
ObjectiveParts token_objective(const Model& model, std::span<const Var> params,
                               const PromptEmbedding& prompt, const AudioSequence& prefix,
                               const Tensor& e_orig, const ExplainHyper& hyper,
                               const Tensor& noise);

struct TokenExplanation {
  std::size_t t = 0;                // 1-based target step
  std::vector<double> mask;         // length L, deterministic readout
  std::vector<double> trajectory;   // stochastic objective per epoch
  double initial_loss = 0;          // deterministic objective before training
  double final_loss = 0;            // deterministic objective after training
  double initial_fact_cos = 0;
  double final_fact_cos = 0;
};

// Trains a fresh explainer for step t (1 <= t <= T) against the frozen model
// and returns its mask. Seeded from mix_seed(hyper.seed, t).
TokenExplanation explain_token(const Model& model, const PromptEmbedding& prompt,
                               const AudioSequence& audio, std::size_t t,
                               const ExplainHyper& hyper);

struct ExplanationResult {
  Tensor per_token;                // T x L
  std::vector<double> aggregate;   // length L
  std::optional<std::pair<std::size_t, std::size_t>> interval;
  std::vector<TokenExplanation> tokens;
  ExplainHyper hyper;
};

// Mean of rows s..n (1-based, inclusive) or of all rows.
std::vector<double> aggregate_masks(const Tensor& per_token,
                                    std::optional<std::pair<std::size_t, std::size_t>> interval = {});

// Explains every step with up to `jobs` worker threads. The result does not
// depend on the worker count.
ExplanationResult explain_sequence(const Model& model, const PromptEmbedding& prompt,
                                   const AudioSequence& audio, const ExplainHyper& hyper,
                                   std::optional<std::pair<std::size_t, std::size_t>> interval = {},
                                   int jobs = 1);

}  // namespace xattn

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xattn/tape.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

struct ModelConfig {
  int text_vocab = 32;
  int audio_vocab = 64;
  int d_text = 32;  // width of a text-token representation row
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 2;
  int d_head = 16;
  int d_ff = 64;
  int n_codebooks = 1;
  int max_seq_len = 33;  // begin-of-sequence slot + 32 audio tokens
  int max_prompt_len = 8;
  // Layer whose last-position output is reported as the latent vector.
  // n_layers (the default, also used for 0) means the normalized state that
  // feeds the logit heads.
  int latent_layer = 0;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Token ids of a prompt together with their representation rows (L x d_text).
struct PromptEmbedding {
  std::vector<int> token_ids;
  Tensor rows;

  std::size_t length() const { return token_ids.size(); }
};

// One id list per codebook, all of the same length.
struct AudioSequence {
  std::vector<std::vector<int>> codebooks;

  static AudioSequence single(std::vector<int> ids) { return AudioSequence{{std::move(ids)}}; }
  std::size_t length() const { return codebooks.empty() ? 0 : codebooks[0].size(); }
  std::size_t n_codebooks() const { return codebooks.size(); }
  // First `n` steps of every codebook.
  AudioSequence prefix(std::size_t n) const;
  void validate(int audio_vocab) const;
  friend bool operator==(const AudioSequence&, const AudioSequence&) = default;
};

enum class InjectionMode { none, factual, counterfactual };

// Selects how post-softmax cross-attention columns are rescaled: by m_j
// (factual), by 1 - m_j (counterfactual), or not at all. The mask is a
// 1 x L var on the tape the forward pass records on.
struct MaskInjection {
  InjectionMode mode = InjectionMode::none;
  Var mask;

  static MaskInjection none() { return {}; }
  static MaskInjection factual(Var m) { return {InjectionMode::factual, m}; }
  static MaskInjection counterfactual(Var m) { return {InjectionMode::counterfactual, m}; }
};

// Optional instrumentation and perturbation points of a forward pass.
struct ForwardOptions {
  MaskInjection injection;
  // Multiplies pre-softmax cross-attention column j by factors[j] in every
  // layer and head. Empty means no scaling.
  std::vector<double> pre_softmax_column_scale;
  // Adds a zero-valued parameter to every post-softmax attention map so that
  // callers can read the full d(output)/d(map) from the returned vars.
  bool capture_attention = false;
  // Same probe on the latent: ForwardResult::latent_probe is a zero
  // positions x d_model leaf added to the state that e_t is read from.
  bool capture_latent = false;
  // Called on each cross-attention map before mask injection; may edit it.
  // Only meaningful on untracked forwards (edits are not differentiated).
  std::function<void(int layer, int head, Tensor& probs)> cross_probs_hook;
  // Drops the cross-attention residual contribution entirely.
  bool skip_cross_attention = false;
  // Also compute logits for every position (teacher-forced training).
  bool all_positions_logits = false;
};

struct ForwardResult {
  Var latent;               // 1 x d_model at the last position
  std::vector<Var> logits;  // per codebook, 1 x audio_vocab at the last position
  Var hidden;               // normalized final states, positions x d_model
  std::vector<Var> all_logits;  // per codebook, positions x audio_vocab
  Var latent_probe;  // set when ForwardOptions::capture_latent
  // [layer][head], captured only when ForwardOptions::capture_attention.
  std::vector<std::vector<Var>> self_attention;
  std::vector<std::vector<Var>> cross_attention;
  // Instrumentation: cross-attention layers and heads that applied the mask.
  int cross_layers_masked = 0;
  int cross_heads_masked = 0;
};

// Text-conditioned autoregressive decoder: causal self-attention over the
// audio prefix, cross-attention into the prompt rows, and a GELU MLP, each
// pre-normalized with a residual connection.
class Model {
 public:
  Model() = default;
  static Model initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::span<Tensor> parameters() { return params_; }
  std::span<const Tensor> parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  std::size_t param_index(const std::string& name) const;

  // Copy of this model with every decoder weight redrawn from `seed`. The
  // text embedding tables (the stand-in text encoder) are kept.
  Model with_randomized_decoder(std::uint64_t seed) const;

  // Hex digest over config and parameter bytes.
  std::string checksum() const;

  // Construction from stored tensors; validates names and shapes.
  static Model from_parameters(const ModelConfig& config, std::vector<std::string> names,
                               std::vector<Tensor> params);

  friend bool operator==(const Model& a, const Model& b) {
    return a.config_ == b.config_ && a.names_ == b.names_ && a.params_ == b.params_;
  }

  struct LayerIndex {
    std::size_t ln1_g, ln1_b, self_q, self_k, self_v, self_o;
    std::size_t ln2_g, ln2_b, cross_q, cross_k, cross_v, cross_o;
    std::size_t ln3_g, ln3_b, ff_w1, ff_b1, ff_w2, ff_b2;
  };
  struct Index {
    std::size_t text_embed = 0, text_pos = 0, audio_pos = 0, final_g = 0, final_b = 0;
    std::vector<std::size_t> audio_embed, head_w, head_b;
    std::vector<LayerIndex> layers;
  };
  const Index& index() const { return index_; }

 private:
  void build_layout(std::vector<std::pair<std::size_t, std::size_t>>* shapes);

  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  Index index_;
};

// Model weights bound onto a tape. Frozen binding aliases the model storage;
// trainable binding records gradient-requiring copies.
struct BoundModel {
  const Model* model = nullptr;
  std::vector<Var> vars;

  static BoundModel frozen(const Model& model, Tape& tape);
  static BoundModel trainable(const Model& model, Tape& tape);
  const Var& operator[](const std::string& name) const;
};

// Representation rows for a prompt. Throws VocabularyError on unknown ids
// and CapacityError when the prompt exceeds max_prompt_len.
PromptEmbedding encode_text(const Model& model, std::span<const int> token_ids);
Var encode_text(const BoundModel& bound, std::span<const int> token_ids);

// One decoder pass over [BOS, prefix...]. Returns the latent and logits for
// the next audio token. Throws ContractError when the injection mask length
// differs from the prompt length, CapacityError when the prefix is too long.
ForwardResult forward_latent(const BoundModel& bound, const Var& prompt,
                             const AudioSequence& prefix, const ForwardOptions& options = {});

// Convenience overload on a private tape; returns the latent values and logits
// with no gradient tracking.
struct LatentValues {
  Tensor latent;
  std::vector<Tensor> logits;
};
LatentValues forward_values(const Model& model, const PromptEmbedding& prompt,
                            const AudioSequence& prefix, InjectionMode mode = InjectionMode::none,
                            std::span<const double> mask = {});

struct SamplingConfig {
  int top_k = 8;
  double temperature = 1.0;  // 0 selects argmax decoding
  std::uint64_t seed = 0;
};

struct Generation {
  AudioSequence audio;
  std::vector<Tensor> latents;  // e_t for every generated step
};

// Per-step mask schedule for generation: row t (T x L) is injected while
// predicting step t.
struct StepMasks {
  InjectionMode mode = InjectionMode::none;
  const Tensor* masks = nullptr;
};

Generation generate(const Model& model, const PromptEmbedding& prompt, int length,
                    const SamplingConfig& sampling, const StepMasks& step_masks = {});

}  // namespace xattn

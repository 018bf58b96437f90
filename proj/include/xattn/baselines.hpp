#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xattn/model.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

enum class Normalization { none, max, minmax };

struct AttributionVector {
  std::vector<double> scores;
  Normalization normalization = Normalization::none;
};

// v / max(v); all zeros when max(v) <= 0.
std::vector<double> max_scale(std::vector<double> v);
// (v - min) / (max - min); all zeros when every value is equal.
std::vector<double> minmax_scale(std::vector<double> v);

// Uniform [0, 1) values, i.i.d. from seed.
std::vector<double> random_mask(std::size_t length, std::uint64_t seed);

// Attention maps and their gradients for the logit(s) of audio[t - 1],
// averaged over codebooks. Maps are [layer][head].
struct AttentionGrads {
  std::vector<std::vector<Tensor>> self_maps, self_grads;
  std::vector<std::vector<Tensor>> cross_maps, cross_grads;
  Tensor latent_grad;  // 1 x d_model, d(target logit)/d(e_t)
  Tensor latent;       // 1 x d_model
};
AttentionGrads attention_gradients(const Model& model, const PromptEmbedding& prompt,
                                   const AudioSequence& audio, std::size_t t);

// Mean over heads of the positive part of grad * map.
Tensor positive_grad_map(const std::vector<Tensor>& maps, const std::vector<Tensor>& grads);

struct GradCamOptions {
  bool last_row_only = false;  // average only the query row predicting z_t
};

AttributionVector gradcam_e(const Model& model, const PromptEmbedding& prompt,
                            const AudioSequence& audio, std::size_t t,
                            const GradCamOptions& options = {});

// Channel contributions of each text token to the last position of the last
// cross-attention layer: row j = sum_h A_h[last, j] * (V_h[j] W_o,h).
Tensor cross_token_contributions(const Model& model, const PromptEmbedding& prompt,
                                 const std::vector<Tensor>& last_layer_maps);

AttributionVector gradcam_a(const Model& model, const PromptEmbedding& prompt,
                            const AudioSequence& audio, std::size_t t);

// Per-token cross-entropy increase of z_t when the pre-softmax scores of one
// text column are scaled by (1 - k) in every cross-attention layer and head.
std::vector<double> atman_raw(const Model& model, const PromptEmbedding& prompt,
                              const AudioSequence& audio, std::size_t t, double k = 0.9);
AttributionVector atman(const Model& model, const PromptEmbedding& prompt,
                        const AudioSequence& audio, std::size_t t, double k = 0.9);

// Decoder-side relevance propagation with identity text-side relevance.
AttributionVector chefer(const Model& model, const PromptEmbedding& prompt,
                         const AudioSequence& audio, std::size_t t);

// Names accepted by explain_with_method(); Rollout is intentionally absent.
const std::vector<std::string>& baseline_methods();

// T x L per-token masks of a baseline over every step of `audio`.
Tensor baseline_masks(const std::string& method, const Model& model,
                      const PromptEmbedding& prompt, const AudioSequence& audio,
                      std::uint64_t seed);

}  // namespace xattn

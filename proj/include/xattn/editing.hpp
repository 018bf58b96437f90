#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "xattn/evaluation.hpp"
#include "xattn/model.hpp"

namespace xattn {

// Sets mask[t][l] = c for t in [t_from, t_to] (1-based, inclusive).
struct MaskEdit {
  std::size_t l = 0;
  std::size_t t_from = 1;
  std::size_t t_to = 1;
  double c = 0.9;
};

constexpr double kAmplify = 0.9;
constexpr double kSuppress = 0.1;

// Applies edits in order; later edits win on overlap. Throws ContractError on
// an out-of-range index or a value outside [0, 1].
Tensor reweight(const Tensor& masks, std::span<const MaskEdit> edits);

// Generation where step t uses factual injection with row t of masks.
AudioSequence regenerate_with_mask(const Model& model, const PromptEmbedding& prompt,
                                   const Tensor& masks, const SamplingConfig& sampling);

struct EditScores {
  double kl_before = 0;
  double kl_after = 0;
};
// KL(reference || classify(Z)) for the original and the edited audio.
EditScores edit_eval(const ConceptClassifier& classifier, const AudioSequence& original,
                     const AudioSequence& edited, std::span<const double> reference);

// Expected class distribution of the prompt with `removed` dropped: the
// classifier applied to the planted target of the remaining concepts.
std::vector<double> edit_reference(const ConceptClassifier& classifier,
                                   std::span<const int> prompt, int removed, int length);

}  // namespace xattn

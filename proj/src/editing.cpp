#include "xattn/editing.hpp"

#include "xattn/errors.hpp"

namespace xattn {

Tensor reweight(const Tensor& masks, std::span<const MaskEdit> edits) {
  Tensor out = masks;
  for (const MaskEdit& e : edits) {
    if (e.l >= masks.cols()) {
      throw ContractError("edit text index " + std::to_string(e.l) + " outside [0, " +
                          std::to_string(masks.cols()) + ")");
    }
    if (e.t_from < 1 || e.t_from > e.t_to || e.t_to > masks.rows()) {
      throw ContractError("edit range [" + std::to_string(e.t_from) + ", " +
                          std::to_string(e.t_to) + "] outside [1, " +
                          std::to_string(masks.rows()) + "]");
    }
    if (!(e.c >= 0 && e.c <= 1)) throw ContractError("edit value must lie in [0, 1]");
    for (std::size_t t = e.t_from; t <= e.t_to; ++t) out(t - 1, e.l) = e.c;
  }
  return out;
}

AudioSequence regenerate_with_mask(const Model& model, const PromptEmbedding& prompt,
                                   const Tensor& masks, const SamplingConfig& sampling) {
  return regenerate_with_injection(model, prompt, masks, InjectionMode::factual, sampling);
}

EditScores edit_eval(const ConceptClassifier& classifier, const AudioSequence& original,
                     const AudioSequence& edited, std::span<const double> reference) {
  return {kl_divergence(reference, classifier.classify(original)),
          kl_divergence(reference, classifier.classify(edited))};
}

std::vector<double> edit_reference(const ConceptClassifier& classifier,
                                   std::span<const int> prompt, int removed, int length) {
  std::vector<int> kept;
  for (int id : prompt) {
    if (id != removed) kept.push_back(id);
  }
  const ToyTaskSpec& spec = classifier.spec;
  const std::vector<int> concepts = prompt_concepts(spec, kept);
  std::vector<int> ids(length);
  for (int t = 0; t < length; ++t) {
    // Without any remaining concept the intended audio is background.
    ids[t] = concepts.empty() ? spec.n_concepts * spec.range_width
                              : spec.concept_range(concepts[(t / spec.segment_length) %
                                                            concepts.size()]).first;
  }
  return classifier.classify(AudioSequence::single(std::move(ids)));
}

}  // namespace xattn

#include "xattn/toy_task.hpp"

#include <algorithm>

#include "xattn/errors.hpp"

namespace xattn {

void ToyTaskSpec::validate() const {
  if (n_concepts < 1) throw ParameterError("toy task: n_concepts must be >= 1");
  if (n_fillers < 0) throw ParameterError("toy task: n_fillers must be >= 0");
  if (prompt_length < 1) throw ParameterError("toy task: prompt_length must be >= 1");
  if (audio_length < 1) throw ParameterError("toy task: audio_length must be >= 1");
  if (segment_length < 1) throw ParameterError("toy task: segment_length must be >= 1");
  if (range_width < 1) throw ParameterError("toy task: range_width must be >= 1");
  if (max_concepts_per_prompt < 1 || max_concepts_per_prompt > n_concepts) {
    throw ParameterError("toy task: max_concepts_per_prompt must lie in [1, n_concepts]");
  }
  if (max_concepts_per_prompt > prompt_length) {
    throw ParameterError("toy task: max_concepts_per_prompt exceeds prompt_length");
  }
  if (n_concepts * range_width >= audio_vocab) {
    throw ParameterError("toy task: concept ranges must cover fewer than audio_vocab ids");
  }
  if (n_fillers == 0 && prompt_length > max_concepts_per_prompt) {
    throw ParameterError("toy task: prompts longer than the concept count need fillers");
  }
}

int ToyTaskSpec::concept_of_audio(int audio_id) const {
  if (audio_id < 0 || audio_id >= n_concepts * range_width) return -1;
  return audio_id / range_width;
}

std::vector<int> prompt_concepts(const ToyTaskSpec& spec, std::span<const int> prompt) {
  std::vector<int> out;
  for (int id : prompt) {
    if (spec.is_concept_token(id) && std::find(out.begin(), out.end(), id) == out.end()) {
      out.push_back(id);
    }
  }
  return out;
}

AudioSequence make_target(const ToyTaskSpec& spec, std::span<const int> prompt, int length,
                          RngStream& rng) {
  const std::vector<int> concepts = prompt_concepts(spec, prompt);
  if (concepts.empty()) throw ParameterError("toy prompt contains no concept token");
  std::vector<int> ids(length);
  for (int t = 0; t < length; ++t) {
    const int c = concepts[(t / spec.segment_length) % concepts.size()];
    ids[t] = spec.concept_range(c).first + static_cast<int>(rng.below(spec.range_width));
  }
  return AudioSequence::single(std::move(ids));
}

ToyDataset make_toy_dataset(const ToyTaskSpec& spec, int n_prompts, std::uint64_t seed) {
  spec.validate();
  if (n_prompts < 1) throw ParameterError("toy dataset needs n_prompts >= 1");
  RngStream rng(seed);
  ToyDataset ds{spec, {}};
  for (int i = 0; i < n_prompts; ++i) {
    const int k = 1 + static_cast<int>(rng.below(spec.max_concepts_per_prompt));
    std::vector<int> pool(spec.n_concepts);
    for (int c = 0; c < spec.n_concepts; ++c) pool[c] = c;
    std::vector<int> prompt;
    for (int j = 0; j < k; ++j) {
      const std::size_t pick = j + rng.below(pool.size() - j);
      std::swap(pool[j], pool[pick]);
      prompt.push_back(pool[j]);
    }
    while (static_cast<int>(prompt.size()) < spec.prompt_length) {
      prompt.push_back(spec.n_concepts + static_cast<int>(rng.below(spec.n_fillers)));
    }
    for (std::size_t j = prompt.size(); j-- > 1;) std::swap(prompt[j], prompt[rng.below(j + 1)]);
    ToyExample ex;
    ex.target = make_target(spec, prompt, spec.audio_length, rng);
    ex.concepts = prompt_concepts(spec, prompt);
    ex.prompt = std::move(prompt);
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

Tensor relevance_labels(const ToyTaskSpec& spec, std::span<const int> prompt,
                        const AudioSequence& audio) {
  if (audio.length() == 0 || prompt.empty()) throw ContractError("relevance labels need data");
  Tensor labels(audio.length(), prompt.size());
  for (std::size_t t = 0; t < audio.length(); ++t) {
    const int c = spec.concept_of_audio(audio.codebooks[0][t]);
    for (std::size_t l = 0; l < prompt.size(); ++l) labels(t, l) = (c >= 0 && prompt[l] == c);
  }
  return labels;
}

ModelConfig toy_model_config(const ToyTaskSpec& spec) {
  ModelConfig c;
  c.text_vocab = std::max(c.text_vocab, spec.text_vocab());
  c.audio_vocab = spec.audio_vocab;
  c.max_prompt_len = std::max(c.max_prompt_len, spec.prompt_length);
  c.max_seq_len = std::max(c.max_seq_len, spec.audio_length + 1);
  return c;
}

}  // namespace xattn

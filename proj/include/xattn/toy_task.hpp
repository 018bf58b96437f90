#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "xattn/model.hpp"
#include "xattn/rng.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

// Planted-relevance task. Text ids [0, n_concepts) are concept tokens, ids
// [n_concepts, n_concepts + n_fillers) are fillers. Concept c owns the audio
// id range [c * range_width, (c + 1) * range_width).
struct ToyTaskSpec {
  int n_concepts = 4;
  int n_fillers = 4;
  int prompt_length = 8;
  int audio_length = 32;
  int segment_length = 8;
  int range_width = 12;
  int audio_vocab = 64;
  int max_concepts_per_prompt = 3;

  void validate() const;
  int text_vocab() const { return n_concepts + n_fillers; }
  bool is_concept_token(int text_id) const { return text_id >= 0 && text_id < n_concepts; }
  std::pair<int, int> concept_range(int c) const { return {c * range_width, (c + 1) * range_width}; }
  // Concept whose range contains the audio id, or -1.
  int concept_of_audio(int audio_id) const;

  friend bool operator==(const ToyTaskSpec&, const ToyTaskSpec&) = default;
};

struct ToyExample {
  std::vector<int> prompt;
  AudioSequence target;
  std::vector<int> concepts;  // distinct concepts in prompt order
};

struct ToyDataset {
  ToyTaskSpec spec;
  std::vector<ToyExample> examples;
};

// Distinct concept ids of a prompt in order of first appearance.
std::vector<int> prompt_concepts(const ToyTaskSpec& spec, std::span<const int> prompt);

// Target audio for a fixed prompt: step t belongs to concept
// concepts[(t / segment_length) % k] and draws uniformly from its range.
AudioSequence make_target(const ToyTaskSpec& spec, std::span<const int> prompt, int length,
                          RngStream& rng);

ToyDataset make_toy_dataset(const ToyTaskSpec& spec, int n_prompts, std::uint64_t seed);

// T x L labels: (t, l) is 1 when prompt[l] is the concept owning audio[t].
Tensor relevance_labels(const ToyTaskSpec& spec, std::span<const int> prompt,
                        const AudioSequence& audio);

// Model config sized for the task.
ModelConfig toy_model_config(const ToyTaskSpec& spec);

}  // namespace xattn

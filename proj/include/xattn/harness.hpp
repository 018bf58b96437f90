#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xattn/config.hpp"

namespace xattn {

// Frozen prompt set with the trained model's original generations.
struct BenchmarkItem {
  std::vector<int> prompt;
  AudioSequence audio;
  std::uint64_t generation_seed = 0;
};

struct Benchmark {
  ToyTaskSpec spec;
  std::string model_checksum;
  int top_k = 8;
  double temperature = 1.0;
  std::vector<BenchmarkItem> items;

  std::vector<std::vector<int>> prompts() const;
  std::vector<AudioSequence> audio() const;
};

Benchmark make_benchmark(const Model& model, const ToyTaskSpec& spec, int n_prompts,
                         std::uint64_t prompt_seed, std::uint64_t generation_seed, int top_k,
                         double temperature);
Json to_json(const Benchmark& b);
Benchmark benchmark_from_json(const Json& j);

// Per-token optimizer statistics, only recorded for the learned explainer.
struct TokenStats {
  std::vector<double> initial_loss, final_loss, initial_fact_cos, final_fact_cos;
};

struct ExplanationSet {
  std::string method;
  std::vector<Tensor> per_token;                // one T x L mask per prompt
  std::vector<std::vector<double>> aggregate;   // one length-L vector per prompt
  std::vector<TokenStats> stats;                // empty for baselines
};

// "concept_<c>" or "filler_<f>".
std::string token_name(const ToyTaskSpec& spec, int id);

Json to_json(const ExplanationSet& set, const Benchmark& benchmark, const RunConfig& config,
             const std::string& model_checksum);
ExplanationSet explanation_set_from_json(const Json& j);

// Computes one method's masks for every benchmark item.
ExplanationSet compute_explanations(const std::string& method, const Model& model,
                                    const Benchmark& benchmark, const RunConfig& config,
                                    int jobs);

std::vector<EvalItem> eval_items(const Benchmark& benchmark, const ExplanationSet& set);
EvalSettings eval_settings(const RunConfig& config, int jobs);

Json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const Json& j);

// Runs one CLI invocation: args excludes the program name. Returns the exit
// code: 0 success, 2 usage or config error, 3 numeric or internal failure.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace xattn

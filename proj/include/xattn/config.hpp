#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xattn/editing.hpp"
#include "xattn/evaluation.hpp"
#include "xattn/explainer.hpp"
#include "xattn/io.hpp"
#include "xattn/toy_task.hpp"
#include "xattn/train.hpp"

namespace xattn {

struct TrainSettings {
  int n_prompts = 1000;
  int epochs = 20;
  double lr = 3e-3;
  int batch_size = 8;
};

struct EvalConfig {
  int n_prompts = 20;
  int n_seeds = 5;
  int top_k = 8;
  double temperature = 1.0;
  bool same_seed = false;
};

struct SweepConfig {
  std::vector<double> alphas = {1e-1, 1e-3};
  std::vector<double> betas = {1e-1};
};

struct EditConfig {
  int n_seeds = 20;
  double c = kSuppress;
  // Benchmark prompt to edit; -1 picks the first prompt with two or more
  // concepts. The edited position is its first concept token.
  int prompt = -1;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ToyTaskSpec task;
  ModelConfig model;
  TrainSettings train;
  ExplainHyper explain;
  EvalConfig eval;
  SweepConfig sweep;
  EditConfig edit;
  std::vector<std::string> methods;
  // Optional committed artifacts, resolved against the config file directory.
  std::filesystem::path model_path;
  std::filesystem::path benchmark_path;

  // Canonical JSON of every resolved field; the config hash is taken over it.
  Json canonical() const;
  std::string hash() const;
};

// "audiogenx" followed by the baselines.
const std::vector<std::string>& all_methods();

// Parses and validates a config document. Missing fields take defaults
// (K = 50, lr = 1e-3, alpha = 1e-3, beta = 0.1); `seed` is required. Throws
// ConfigError listing every violated field. `base_dir` resolves relative
// artifact paths.
RunConfig parse_config(const Json& j, const std::filesystem::path& base_dir = {});

// Reads `path`, applies the XATTN_SEED environment override, then parses.
RunConfig load_config(const std::filesystem::path& path);

// Derived seeds for each pipeline stage.
enum class SeedStream : std::uint64_t {
  dataset = 1,
  model_init,
  training,
  benchmark,
  originals,
  explainer,
  evaluation,
  baselines,
  sanity,
  edit,
};
std::uint64_t stage_seed(const RunConfig& config, SeedStream stream);

}  // namespace xattn

#include "xattn/config.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <set>

#include "xattn/baselines.hpp"
#include "xattn/errors.hpp"
#include "xattn/rng.hpp"

namespace xattn {
namespace {

// Collects every violation instead of stopping at the first.
class FieldReader {
 public:
  FieldReader(const Json& j, std::string prefix, std::vector<std::string>& errors)
      : j_(j), prefix_(std::move(prefix)), errors_(errors) {
    if (!j_.is_object()) fail("", "must be an object");
  }

  void read(const char* key, int& out, int lo, int hi = std::numeric_limits<int>::max()) {
    const Json* v = take(key);
    if (!v) return;
    if (!v->is_number_integer()) return fail(key, "must be an integer");
    const auto x = v->get<long long>();
    if (x < lo || x > hi) {
      return fail(key, hi == std::numeric_limits<int>::max()
                           ? "must be >= " + std::to_string(lo)
                           : "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    out = static_cast<int>(x);
  }

  void read(const char* key, double& out, const std::function<bool(double)>& ok,
            const char* rule) {
    const Json* v = take(key);
    if (!v) return;
    if (!v->is_number()) return fail(key, "must be a number");
    const double x = v->get<double>();
    if (!std::isfinite(x) || !ok(x)) return fail(key, rule);
    out = x;
  }

  void read(const char* key, bool& out) {
    const Json* v = take(key);
    if (!v) return;
    if (!v->is_boolean()) return fail(key, "must be true or false");
    out = v->get<bool>();
  }

  void read(const char* key, std::string& out) {
    const Json* v = take(key);
    if (!v) return;
    if (!v->is_string()) return fail(key, "must be a string");
    out = v->get<std::string>();
  }

  void read(const char* key, std::vector<double>& out, const std::function<bool(double)>& ok,
            const char* rule) {
    const Json* v = take(key);
    if (!v) return;
    if (!v->is_array() || v->empty()) return fail(key, "must be a nonempty array of numbers");
    std::vector<double> xs;
    for (const Json& e : *v) {
      if (!e.is_number() || !std::isfinite(e.get<double>()) || !ok(e.get<double>())) {
        return fail(key, std::string("entries ") + rule);
      }
      xs.push_back(e.get<double>());
    }
    out = xs;
  }

  const Json* take(const char* key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  void fail(const std::string& key, const std::string& message) {
    errors_.push_back(path(key) + ": " + message);
  }

  std::string path(const std::string& key) const {
    if (prefix_.empty()) return key.empty() ? "config" : key;
    return key.empty() ? prefix_ : prefix_ + "." + key;
  }

  // Flags keys that no read() asked for.
  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) fail(key, "unknown field");
    }
  }

 private:
  const Json& j_;
  std::string prefix_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

const Json kEmpty = Json::object();

const Json& section(const Json& j, const char* key) {
  return j.is_object() && j.contains(key) ? j.at(key) : kEmpty;
}

bool nonnegative(double x) { return x >= 0; }
bool positive(double x) { return x > 0; }

std::string fnv_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

const std::vector<std::string>& all_methods() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n = {"audiogenx"};
    for (const std::string& b : baseline_methods()) n.push_back(b);
    return n;
  }();
  return names;
}

RunConfig parse_config(const Json& j, const std::filesystem::path& base_dir) {
  std::vector<std::string> errors;
  RunConfig c;
  FieldReader top(j, "", errors);

  if (const Json* s = top.take("seed")) {
    if (!s->is_number_integer() || (!s->is_number_unsigned() && s->get<long long>() < 0)) {
      top.fail("seed", "must be a non-negative integer");
    } else {
      c.seed = s->get<std::uint64_t>();
    }
  } else {
    top.fail("seed", "is required");
  }

  top.take("task");
  FieldReader task(section(j, "task"), "task", errors);
  task.read("n_concepts", c.task.n_concepts, 1);
  task.read("n_fillers", c.task.n_fillers, 0);
  task.read("prompt_length", c.task.prompt_length, 1);
  task.read("audio_length", c.task.audio_length, 1);
  task.read("segment_length", c.task.segment_length, 1);
  task.read("range_width", c.task.range_width, 1);
  task.read("audio_vocab", c.task.audio_vocab, 2);
  task.read("max_concepts_per_prompt", c.task.max_concepts_per_prompt, 1);
  task.finish();
  if (errors.empty()) {
    try {
      c.task.validate();
    } catch (const Error& e) {
      errors.push_back(std::string("task: ") + e.what());
    }
  }

  c.model = toy_model_config(c.task);
  top.take("model");
  FieldReader model(section(j, "model"), "model", errors);
  model.read("d_text", c.model.d_text, 1);
  model.read("d_model", c.model.d_model, 1);
  model.read("n_layers", c.model.n_layers, 1);
  model.read("n_heads", c.model.n_heads, 1);
  model.read("d_head", c.model.d_head, 1);
  model.read("d_ff", c.model.d_ff, 1);
  model.read("n_codebooks", c.model.n_codebooks, 1);
  model.read("latent_layer", c.model.latent_layer, 0);
  model.finish();
  if (c.model.d_model != c.model.n_heads * c.model.d_head) {
    errors.push_back("model.d_model: must equal n_heads * d_head");
  }
  if (c.model.latent_layer > c.model.n_layers) {
    errors.push_back("model.latent_layer: must lie in [0, n_layers]");
  }

  top.take("train");
  FieldReader train(section(j, "train"), "train", errors);
  train.read("n_prompts", c.train.n_prompts, 1);
  train.read("epochs", c.train.epochs, 1);
  train.read("lr", c.train.lr, positive, "must be > 0");
  train.read("batch_size", c.train.batch_size, 1);
  train.finish();

  top.take("explain");
  FieldReader explain(section(j, "explain"), "explain", errors);
  explain.read("epochs", c.explain.epochs, 1);
  explain.read("lr", c.explain.lr, nonnegative, "must be >= 0");
  explain.read("alpha", c.explain.alpha, nonnegative, "must be >= 0");
  explain.read("beta", c.explain.beta, nonnegative, "must be >= 0");
  explain.read("tau", c.explain.tau, positive, "must be > 0");
  explain.read("hidden", c.explain.hidden, 0);
  explain.finish();

  top.take("eval");
  FieldReader eval(section(j, "eval"), "eval", errors);
  eval.read("n_prompts", c.eval.n_prompts, 1);
  eval.read("n_seeds", c.eval.n_seeds, 1);
  eval.read("top_k", c.eval.top_k, 1);
  eval.read("temperature", c.eval.temperature, nonnegative, "must be >= 0");
  eval.read("same_seed", c.eval.same_seed);
  eval.finish();

  top.take("sweep");
  FieldReader sweep(section(j, "sweep"), "sweep", errors);
  sweep.read("alphas", c.sweep.alphas, nonnegative, "must be >= 0");
  sweep.read("betas", c.sweep.betas, nonnegative, "must be >= 0");
  sweep.finish();

  top.take("edit");
  FieldReader edit(section(j, "edit"), "edit", errors);
  edit.read("n_seeds", c.edit.n_seeds, 1);
  edit.read("c", c.edit.c, [](double x) { return x >= 0 && x <= 1; }, "must lie in [0, 1]");
  edit.read("prompt", c.edit.prompt, -1);
  edit.finish();

  c.methods = all_methods();
  if (const Json* m = top.take("methods")) {
    if (!m->is_array() || m->empty()) {
      top.fail("methods", "must be a nonempty array of method names");
    } else {
      c.methods.clear();
      for (const Json& name : *m) {
        const bool known = name.is_string() &&
                           std::find(all_methods().begin(), all_methods().end(),
                                     name.get<std::string>()) != all_methods().end();
        if (!known) {
          top.fail("methods", "unknown method " + name.dump());
          continue;
        }
        if (std::find(c.methods.begin(), c.methods.end(), name.get<std::string>()) !=
            c.methods.end()) {
          top.fail("methods", "duplicate method " + name.dump());
          continue;
        }
        c.methods.push_back(name.get<std::string>());
      }
    }
  }

  std::string model_path, benchmark_path;
  top.read("model_path", model_path);
  top.read("benchmark_path", benchmark_path);
  if (!model_path.empty()) c.model_path = base_dir / model_path;
  if (!benchmark_path.empty()) c.benchmark_path = base_dir / benchmark_path;
  top.finish();

  if (!errors.empty()) {
    std::string message = "invalid config:";
    for (const std::string& e : errors) message += "\n  " + e;
    throw ConfigError(message);
  }
  c.explain.seed = stage_seed(c, SeedStream::explainer);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw ConfigError("config: file " + path.string() + " does not exist");
  }
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  if (const char* env = std::getenv("XATTN_SEED")) {
    char* end = nullptr;
    const unsigned long long s = std::strtoull(env, &end, 10);
    if (*env == '\0' || *end != '\0' || *env == '-') {
      throw ConfigError("XATTN_SEED: must be a non-negative integer");
    }
    if (!j.is_object()) j = Json::object();
    j["seed"] = s;
  }
  return parse_config(j, path.parent_path());
}

Json RunConfig::canonical() const {
  Json j;
  j["seed"] = seed;
  j["task"] = to_json(task);
  j["model"] = to_json(model);
  j["train"] = {{"n_prompts", train.n_prompts},
                {"epochs", train.epochs},
                {"lr", train.lr},
                {"batch_size", train.batch_size}};
  j["explain"] = {{"epochs", explain.epochs}, {"lr", explain.lr},     {"alpha", explain.alpha},
                  {"beta", explain.beta},     {"tau", explain.tau},   {"hidden", explain.hidden}};
  j["eval"] = {{"n_prompts", eval.n_prompts},
               {"n_seeds", eval.n_seeds},
               {"top_k", eval.top_k},
               {"temperature", eval.temperature},
               {"same_seed", eval.same_seed}};
  j["sweep"] = {{"alphas", sweep.alphas}, {"betas", sweep.betas}};
  j["edit"] = {{"n_seeds", edit.n_seeds}, {"c", edit.c}, {"prompt", edit.prompt}};
  j["methods"] = methods;
  // Artifact paths are identified by file name only so the hash does not
  // depend on where the checkout lives.
  j["model_path"] = model_path.filename().string();
  j["benchmark_path"] = benchmark_path.filename().string();
  return j;
}

std::string RunConfig::hash() const { return fnv_hex(canonical().dump()); }

std::uint64_t stage_seed(const RunConfig& config, SeedStream stream) {
  return mix_seed(config.seed, static_cast<std::uint64_t>(stream));
}

}  // namespace xattn

#include "xattn/harness.hpp"

#include <chrono>
#include <cstdio>
#include <ostream>

#include "CLI11.hpp"
#include "xattn/baselines.hpp"
#include "xattn/errors.hpp"
#include "xattn/parallel.hpp"
#include "xattn/rng.hpp"

namespace xattn {

std::vector<std::vector<int>> Benchmark::prompts() const {
  std::vector<std::vector<int>> out;
  for (const BenchmarkItem& item : items) out.push_back(item.prompt);
  return out;
}

std::vector<AudioSequence> Benchmark::audio() const {
  std::vector<AudioSequence> out;
  for (const BenchmarkItem& item : items) out.push_back(item.audio);
  return out;
}

Benchmark make_benchmark(const Model& model, const ToyTaskSpec& spec, int n_prompts,
                         std::uint64_t prompt_seed, std::uint64_t generation_seed, int top_k,
                         double temperature) {
  const ToyDataset ds = make_toy_dataset(spec, n_prompts, prompt_seed);
  Benchmark b{spec, model.checksum(), top_k, temperature, {}};
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    BenchmarkItem item;
    item.prompt = ds.examples[i].prompt;
    item.generation_seed = mix_seed(generation_seed, i);
    item.audio = generate(model, encode_text(model, item.prompt), spec.audio_length,
                          SamplingConfig{top_k, temperature, item.generation_seed})
                     .audio;
    b.items.push_back(std::move(item));
  }
  return b;
}

Json to_json(const Benchmark& b) {
  Json items = Json::array();
  for (const BenchmarkItem& item : b.items) {
    items.push_back({{"prompt", item.prompt},
                     {"audio", item.audio.codebooks},
                     {"generation_seed", item.generation_seed}});
  }
  return {{"format", "xattn-benchmark"},
          {"spec", to_json(b.spec)},
          {"model_checksum", b.model_checksum},
          {"top_k", b.top_k},
          {"temperature", b.temperature},
          {"items", items}};
}

Benchmark benchmark_from_json(const Json& j) {
  if (j.value("format", "") != "xattn-benchmark") throw ContractError("not a benchmark file");
  Benchmark b;
  b.spec = toy_spec_from_json(j.at("spec"));
  b.model_checksum = j.at("model_checksum").get<std::string>();
  b.top_k = j.at("top_k").get<int>();
  b.temperature = j.at("temperature").get<double>();
  for (const Json& item : j.at("items")) {
    b.items.push_back({item.at("prompt").get<std::vector<int>>(),
                       AudioSequence{item.at("audio").get<std::vector<std::vector<int>>>()},
                       item.at("generation_seed").get<std::uint64_t>()});
  }
  return b;
}

std::string token_name(const ToyTaskSpec& spec, int id) {
  return spec.is_concept_token(id) ? "concept_" + std::to_string(id)
                                   : "filler_" + std::to_string(id - spec.n_concepts);
}

Json to_json(const ExplanationSet& set, const Benchmark& benchmark, const RunConfig& config,
             const std::string& model_checksum) {
  Json items = Json::array();
  for (std::size_t i = 0; i < set.per_token.size(); ++i) {
    const BenchmarkItem& b = benchmark.items[i];
    std::vector<std::string> names;
    for (int id : b.prompt) names.push_back(token_name(benchmark.spec, id));
    Json item = {{"index", i},
                 {"prompt_tokens", names},
                 {"token_ids", b.prompt},
                 {"audio", b.audio.codebooks},
                 {"per_token_masks", to_json(set.per_token[i])},
                 {"aggregate", set.aggregate[i]}};
    if (i < set.stats.size()) {
      const TokenStats& s = set.stats[i];
      item["initial_loss"] = s.initial_loss;
      item["final_loss"] = s.final_loss;
      item["initial_fact_cos"] = s.initial_fact_cos;
      item["final_fact_cos"] = s.final_fact_cos;
    }
    items.push_back(item);
  }
  Json j = {{"format", "xattn-explanations"},
            {"method", set.method},
            {"model_checksum", model_checksum},
            {"items", items}};
  if (set.method == "audiogenx") {
    const ExplainHyper& h = config.explain;
    j["hyper"] = {{"epochs", h.epochs}, {"lr", h.lr},   {"alpha", h.alpha},   {"beta", h.beta},
                  {"tau", h.tau},       {"hidden", h.hidden}, {"seed", h.seed}};
  }
  return j;
}

ExplanationSet explanation_set_from_json(const Json& j) {
  if (j.value("format", "") != "xattn-explanations") {
    throw ContractError("not an explanations file");
  }
  ExplanationSet set;
  set.method = j.at("method").get<std::string>();
  for (const Json& item : j.at("items")) {
    set.per_token.push_back(tensor_from_json(item.at("per_token_masks")));
    set.aggregate.push_back(item.at("aggregate").get<std::vector<double>>());
    if (item.contains("initial_loss")) {
      set.stats.push_back({item.at("initial_loss").get<std::vector<double>>(),
                           item.at("final_loss").get<std::vector<double>>(),
                           item.at("initial_fact_cos").get<std::vector<double>>(),
                           item.at("final_fact_cos").get<std::vector<double>>()});
    }
  }
  return set;
}

ExplanationSet compute_explanations(const std::string& method, const Model& model,
                                    const Benchmark& benchmark, const RunConfig& config,
                                    int jobs) {
  const std::size_t n = benchmark.items.size();
  ExplanationSet set{method, std::vector<Tensor>(n), std::vector<std::vector<double>>(n), {}};
  if (method == "audiogenx") {
    for (std::size_t i = 0; i < n; ++i) {
      const BenchmarkItem& item = benchmark.items[i];
      const ExplanationResult r = explain_sequence(model, encode_text(model, item.prompt),
                                                   item.audio, config.explain, {}, jobs);
      set.per_token[i] = r.per_token;
      set.aggregate[i] = r.aggregate;
      TokenStats s;
      for (const TokenExplanation& t : r.tokens) {
        s.initial_loss.push_back(t.initial_loss);
        s.final_loss.push_back(t.final_loss);
        s.initial_fact_cos.push_back(t.initial_fact_cos);
        s.final_fact_cos.push_back(t.final_fact_cos);
      }
      set.stats.push_back(std::move(s));
    }
    return set;
  }
  const std::uint64_t seed = stage_seed(config, SeedStream::baselines);
  parallel_for(n, jobs, [&](std::size_t i) {
    const BenchmarkItem& item = benchmark.items[i];
    set.per_token[i] =
        baseline_masks(method, model, encode_text(model, item.prompt), item.audio, mix_seed(seed, i));
    set.aggregate[i] = aggregate_masks(set.per_token[i]);
  });
  return set;
}

std::vector<EvalItem> eval_items(const Benchmark& benchmark, const ExplanationSet& set) {
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < benchmark.items.size(); ++i) {
    const BenchmarkItem& b = benchmark.items[i];
    items.push_back({b.prompt, b.audio, i < set.per_token.size() ? set.per_token[i] : Tensor(),
                     b.generation_seed});
  }
  return items;
}

EvalSettings eval_settings(const RunConfig& config, int jobs) {
  EvalSettings s;
  s.n_seeds = config.eval.n_seeds;
  s.top_k = config.eval.top_k;
  s.temperature = config.eval.temperature;
  s.seed = stage_seed(config, SeedStream::evaluation);
  s.same_seed = config.eval.same_seed;
  s.jobs = jobs;
  return s;
}

namespace {

Json summary_json(const MetricSummary& m) { return {{"mean", m.mean}, {"stderr", m.stderr_}}; }
MetricSummary summary_from_json(const Json& j) {
  return {j.at("mean").get<double>(), j.at("stderr").get<double>()};
}

}  // namespace

Json to_json(const EvalReport& r) {
  return {{"method", r.method},
          {"alpha", r.alpha},
          {"beta", r.beta},
          {"n_prompts", r.n_prompts},
          {"n_seeds", r.n_seeds},
          {"fid_f", summary_json(r.fid_f)},
          {"fid_cf", summary_json(r.fid_cf)},
          {"kl_f", summary_json(r.kl_f)},
          {"kl_cf", summary_json(r.kl_cf)},
          {"size", summary_json(r.size)},
          {"cells",
           {{"fid_f", r.factual.fid},
            {"kl_f", r.factual.kl},
            {"fid_cf", r.counterfactual.fid},
            {"kl_cf", r.counterfactual.kl}}}};
}

EvalReport eval_report_from_json(const Json& j) {
  EvalReport r;
  r.method = j.at("method").get<std::string>();
  r.alpha = j.at("alpha").get<double>();
  r.beta = j.at("beta").get<double>();
  r.n_prompts = j.at("n_prompts").get<int>();
  r.n_seeds = j.at("n_seeds").get<int>();
  r.fid_f = summary_from_json(j.at("fid_f"));
  r.fid_cf = summary_from_json(j.at("fid_cf"));
  r.kl_f = summary_from_json(j.at("kl_f"));
  r.kl_cf = summary_from_json(j.at("kl_cf"));
  r.size = summary_from_json(j.at("size"));
  using Cells = std::vector<std::vector<double>>;
  const Json& c = j.at("cells");
  r.factual = {c.at("fid_f").get<Cells>(), c.at("kl_f").get<Cells>()};
  r.counterfactual = {c.at("fid_cf").get<Cells>(), c.at("kl_cf").get<Cells>()};
  return r;
}

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Options {
  std::string config;
  std::string out;
  int jobs = 1;
  bool timing = false;
  std::string edits;
};

// Resolves artifacts from --out, then from committed fixtures, and computes
// (and writes) whatever is still missing.
class Pipeline {
 public:
  Pipeline(RunConfig config, const Options& options)
      : config_(std::move(config)), hash_(config_.hash()), out_(options.out),
        jobs_(options.jobs) {}

  const RunConfig& config() const { return config_; }
  const std::string& hash() const { return hash_; }
  int jobs() const { return jobs_; }
  fs::path path(const std::string& name) const { return out_ / name; }
  bool has(const std::string& name) const { return fs::exists(path(name)); }

  // Fails before any work is done when a command's output already exists.
  void require_fresh(const std::vector<std::string>& names) const {
    for (const std::string& name : names) {
      if (has(name)) {
        throw ConfigError("--out: " + path(name).string() +
                          " already exists; outputs are write-once, use a new --out");
      }
    }
  }

  Json stamp(Json j) const {
    j["config_hash"] = hash_;
    j["seed"] = config_.seed;
    return j;
  }

  void write_json(const std::string& name, const Json& j) const {
    write_json_once(path(name), stamp(j));
  }

  Json read_own(const std::string& name) const {
    const Json j = read_json(path(name));
    if (j.value("config_hash", "") != hash_) {
      throw ConfigError("--out: " + path(name).string() + " was written by config " +
                        j.value("config_hash", "?") + ", not " + hash_ +
                        "; use a new --out");
    }
    return j;
  }

  const Model& model() {
    if (model_) return *model_;
    if (has("model.json")) {
      model_ = model_from_json(read_own("model.json"));
    } else if (!config_.model_path.empty()) {
      model_ = load_model(config_.model_path);
    } else {
      train();
    }
    if (!(model_->config() == config_.model)) {
      throw ConfigError("model: checkpoint architecture does not match the config");
    }
    return *model_;
  }

  TrainResult train() {
    const ToyDataset ds = make_toy_dataset(config_.task, config_.train.n_prompts,
                                           stage_seed(config_, SeedStream::dataset));
    const Model init =
        Model::initialize(config_.model, stage_seed(config_, SeedStream::model_init));
    const TrainConfig tc{config_.train.epochs, config_.train.lr, config_.train.batch_size,
                         stage_seed(config_, SeedStream::training)};
    TrainResult r = train_toy_model(init, ds, tc);
    const std::string checksum = r.model.checksum();
    write_text_once(path("model.json"), stamp(to_json(r.model)).dump() + "\n");
    write_json("train_log.json", {{"spec", to_json(config_.task)},
                                  {"n_prompts", config_.train.n_prompts},
                                  {"epochs", config_.train.epochs},
                                  {"lr", config_.train.lr},
                                  {"batch_size", config_.train.batch_size},
                                  {"initial_loss", r.initial_loss},
                                  {"loss_curve", r.loss_curve},
                                  {"model_checksum", checksum}});
    model_ = r.model;
    return r;
  }

  const Benchmark& benchmark() {
    if (benchmark_) return *benchmark_;
    const Model& m = model();
    if (has("benchmark.json")) {
      benchmark_ = benchmark_from_json(read_own("benchmark.json"));
    } else if (!config_.benchmark_path.empty()) {
      benchmark_ = benchmark_from_json(read_json(config_.benchmark_path));
    } else {
      benchmark_ = make_benchmark(m, config_.task, config_.eval.n_prompts,
                                  stage_seed(config_, SeedStream::benchmark),
                                  stage_seed(config_, SeedStream::originals), config_.eval.top_k,
                                  config_.eval.temperature);
      write_json("benchmark.json", to_json(*benchmark_));
    }
    if (benchmark_->model_checksum != m.checksum()) {
      throw ConfigError("benchmark: generated by model " + benchmark_->model_checksum +
                        ", but the resolved model is " + m.checksum());
    }
    if (!(benchmark_->spec == config_.task)) {
      throw ConfigError("benchmark: task spec differs from the config");
    }
    const std::size_t n = static_cast<std::size_t>(config_.eval.n_prompts);
    if (benchmark_->items.size() < n) {
      throw ConfigError("eval.n_prompts: benchmark holds only " +
                        std::to_string(benchmark_->items.size()) + " prompts");
    }
    benchmark_->items.resize(n);
    return *benchmark_;
  }

  static std::string explanation_file(const std::string& method) {
    return "explanations_" + method + ".json";
  }

  const ExplanationSet& explanations(const std::string& method) {
    auto it = explanations_.find(method);
    if (it != explanations_.end()) return it->second;
    const Benchmark& b = benchmark();
    const std::string file = explanation_file(method);
    ExplanationSet set;
    if (has(file)) {
      set = explanation_set_from_json(read_own(file));
      if (set.per_token.size() != b.items.size()) {
        throw ConfigError("--out: " + file + " does not cover the benchmark");
      }
    } else {
      const auto start = Clock::now();
      set = compute_explanations(method, model(), b, config_, jobs_);
      explain_seconds_[method] = seconds_since(start);
      write_json(file, to_json(set, b, config_, model().checksum()));
    }
    return explanations_.emplace(method, std::move(set)).first->second;
  }

  double explain_seconds(const std::string& method) const {
    auto it = explain_seconds_.find(method);
    return it == explain_seconds_.end() ? 0.0 : it->second;
  }

  ConceptClassifier classifier() const { return ConceptClassifier{config_.task}; }

 private:
  RunConfig config_;
  std::string hash_;
  fs::path out_;
  int jobs_;
  std::optional<Model> model_;
  std::optional<Benchmark> benchmark_;
  std::map<std::string, ExplanationSet> explanations_;
  std::map<std::string, double> explain_seconds_;
};

std::vector<EvalReport> evaluate_all(Pipeline& p, bool timing, std::string* csv) {
  const Benchmark& b = p.benchmark();
  const EvalSettings settings = eval_settings(p.config(), p.jobs());
  std::vector<EvalReport> reports;
  *csv = "method,alpha,beta,n_prompts,n_seeds,fid_f,fid_cf,kl_f,kl_cf,size,runtime_s,config_hash,seed\n";
  for (const std::string& method : p.config().methods) {
    const std::vector<EvalItem> items = eval_items(b, p.explanations(method));
    EvalReport r = evaluate_masks(method, p.model(), p.classifier(), items, settings);
    const bool learned = method == "audiogenx";
    r.alpha = learned ? p.config().explain.alpha : 0.0;
    r.beta = learned ? p.config().explain.beta : 0.0;
    *csv += method + "," + (learned ? fmt(r.alpha) : "NA") + "," + (learned ? fmt(r.beta) : "NA") +
            "," + std::to_string(r.n_prompts) + "," + std::to_string(r.n_seeds) + "," +
            fmt(r.fid_f.mean) + "," + fmt(r.fid_cf.mean) + "," + fmt(r.kl_f.mean) + "," +
            fmt(r.kl_cf.mean) + "," + fmt(r.size.mean) + "," +
            (timing ? fmt(r.runtime_s + p.explain_seconds(method)) : "NA") + "," + p.hash() +
            "," + std::to_string(p.config().seed) + "\n";
    reports.push_back(std::move(r));
  }
  return reports;
}

Json reports_json(const std::vector<EvalReport>& reports) {
  Json arr = Json::array();
  for (const EvalReport& r : reports) arr.push_back(to_json(r));
  return {{"format", "xattn-eval-cells"}, {"reports", arr}};
}

int cmd_train(Pipeline& p, std::ostream& out) {
  p.require_fresh({"model.json", "train_log.json"});
  const TrainResult r = p.train();
  out << "train-toy: loss " << fmt(r.initial_loss) << " -> " << fmt(r.loss_curve.back())
      << ", model " << r.model.checksum() << " -> " << p.path("model.json").string() << "\n";
  return 0;
}

int cmd_explain(Pipeline& p, std::ostream& out) {
  p.require_fresh({Pipeline::explanation_file("audiogenx")});
  const ExplanationSet& set = p.explanations("audiogenx");
  out << "explain: " << set.per_token.size() << " prompts, size "
      << fmt(size_metric(set.per_token)) << " -> "
      << p.path(Pipeline::explanation_file("audiogenx")).string() << "\n";
  return 0;
}

int cmd_baselines(Pipeline& p, std::ostream& out) {
  std::vector<std::string> methods, files;
  for (const std::string& m : p.config().methods) {
    if (m == "audiogenx") continue;
    methods.push_back(m);
    files.push_back(Pipeline::explanation_file(m));
  }
  if (methods.empty()) throw ConfigError("methods: no baseline method selected");
  p.require_fresh(files);
  for (const std::string& m : methods) p.explanations(m);
  out << "baselines: " << methods.size() << " methods -> " << p.path("").string() << "\n";
  return 0;
}

int cmd_evaluate(Pipeline& p, const Options& o, std::ostream& out) {
  p.require_fresh({"metrics.csv", "eval_cells.json"});
  std::string csv;
  const std::vector<EvalReport> reports = evaluate_all(p, o.timing, &csv);
  write_text_once(p.path("metrics.csv"), csv);
  p.write_json("eval_cells.json", reports_json(reports));
  out << "evaluate: " << reports.size() << " methods -> " << p.path("metrics.csv").string()
      << "\n";
  return 0;
}

int cmd_sweep(Pipeline& p, std::ostream& out) {
  p.require_fresh({"sweep.csv"});
  const Benchmark& b = p.benchmark();
  const std::vector<EvalItem> items = eval_items(b, ExplanationSet{});
  const std::vector<SweepCell> cells =
      sweep(p.model(), p.classifier(), items, p.config().sweep.alphas, p.config().sweep.betas,
            p.config().explain, eval_settings(p.config(), p.jobs()));
  write_text_once(p.path("sweep.csv"), sweep_csv(cells, p.hash(), p.config().seed));
  out << "sweep: " << cells.size() << " cells -> " << p.path("sweep.csv").string() << "\n";
  return 0;
}

int cmd_sanity(Pipeline& p, std::ostream& out) {
  p.require_fresh({"sanity.json"});
  const Benchmark& b = p.benchmark();
  const ExplanationSet& trained = p.explanations("audiogenx");
  const Model& model = p.model();
  const std::uint64_t seed = stage_seed(p.config(), SeedStream::sanity);
  const AggregateFn explain = [&](const Model& m, const PromptEmbedding& u,
                                  const AudioSequence& z, std::size_t i) {
    if (&m == &model) return trained.aggregate[i];
    return explain_sequence(m, u, z, p.config().explain, {}, p.jobs()).aggregate;
  };
  const std::vector<std::vector<int>> prompts = b.prompts();
  const std::vector<AudioSequence> audio = b.audio();
  const SanityReport r = sanity_check(model, explain, prompts, audio, seed);
  Json corr = Json::array();
  for (const auto& c : r.correlations) corr.push_back(c ? Json(*c) : Json(nullptr));
  p.write_json("sanity.json", {{"randomize_seed", seed},
                               {"correlations", corr},
                               {"mean_abs_correlation", r.mean_abs_correlation},
                               {"degenerate", r.degenerate},
                               {"randomized_mask_variance", r.randomized_mask_variance}});
  out << "sanity: mean |spearman| " << fmt(r.mean_abs_correlation) << " -> "
      << p.path("sanity.json").string() << "\n";
  return 0;
}

std::vector<MaskEdit> edits_from_json(const Json& j) {
  if (!j.is_array()) throw ConfigError("--edits: expected a JSON array of edits");
  std::vector<MaskEdit> edits;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const Json& e = j[i];
    const std::string where = "--edits[" + std::to_string(i) + "]";
    if (!e.is_object()) throw ConfigError(where + ": expected an object");
    std::vector<std::string> bad;
    for (const char* key : {"l", "t_from", "t_to"}) {
      if (!e.contains(key) || !e.at(key).is_number_unsigned()) {
        bad.push_back(std::string(key) + " must be a non-negative integer");
      }
    }
    if (!e.contains("c") || !e.at("c").is_number()) bad.push_back("c must be a number");
    if (!bad.empty()) {
      std::string message = where + ":";
      for (const std::string& b : bad) message += " " + b + ";";
      throw ConfigError(message);
    }
    edits.push_back({e.at("l").get<std::size_t>(), e.at("t_from").get<std::size_t>(),
                     e.at("t_to").get<std::size_t>(), e.at("c").get<double>()});
  }
  if (edits.empty()) throw ConfigError("--edits: edit list is empty");
  return edits;
}

int cmd_edit(Pipeline& p, const Options& o, std::ostream& out) {
  p.require_fresh({"edit.json"});
  const Benchmark& b = p.benchmark();
  const ToyTaskSpec& spec = b.spec;
  int index = p.config().edit.prompt;
  if (index < 0) {
    for (std::size_t i = 0; i < b.items.size() && index < 0; ++i) {
      if (prompt_concepts(spec, b.items[i].prompt).size() >= 2) index = static_cast<int>(i);
    }
    if (index < 0) throw ConfigError("edit.prompt: no benchmark prompt has two concepts");
  }
  if (index >= static_cast<int>(b.items.size())) {
    throw ConfigError("edit.prompt: index outside the benchmark");
  }
  const BenchmarkItem& item = b.items[index];
  const std::size_t T = item.audio.length();

  std::vector<MaskEdit> edits;
  if (!o.edits.empty()) {
    if (!fs::exists(o.edits)) throw ConfigError("--edits: file " + o.edits + " does not exist");
    Json j;
    try {
      j = Json::parse(read_text(o.edits));
    } catch (const Json::parse_error& e) {
      throw ConfigError(std::string("--edits: not valid JSON: ") + e.what());
    }
    edits = edits_from_json(j);
  } else {
    std::size_t l = 0;
    while (!spec.is_concept_token(item.prompt[l])) ++l;
    edits.push_back({l, 1, T, p.config().edit.c});
  }
  for (const MaskEdit& e : edits) {
    if (e.l >= item.prompt.size() || e.t_from < 1 || e.t_from > e.t_to || e.t_to > T) {
      throw ConfigError("--edits: edit outside the " + std::to_string(T) + " x " +
                        std::to_string(item.prompt.size()) + " mask");
    }
  }
  const int target = item.prompt[edits.front().l];
  const int concept_class = spec.is_concept_token(target) ? target : spec.n_concepts;

  const Model& model = p.model();
  const ConceptClassifier clf = p.classifier();
  const Tensor& masks = p.explanations("audiogenx").per_token[index];
  const Tensor edited = reweight(masks, edits);
  const std::vector<double> reference = edit_reference(clf, item.prompt, target, static_cast<int>(T));
  const PromptEmbedding u = encode_text(model, item.prompt);
  const std::uint64_t seed = stage_seed(p.config(), SeedStream::edit);
  const int n = p.config().edit.n_seeds;

  struct Row {
    std::uint64_t seed;
    double mass_before, mass_after, kl_before, kl_after;
  };
  std::vector<Row> rows(n);
  parallel_for(n, p.jobs(), [&](std::size_t k) {
    const SamplingConfig s{p.config().eval.top_k, p.config().eval.temperature, mix_seed(seed, k)};
    const AudioSequence before = regenerate_with_mask(model, u, masks, s);
    const AudioSequence after = regenerate_with_mask(model, u, edited, s);
    const EditScores kl = edit_eval(clf, before, after, reference);
    rows[k] = {s.seed, clf.classify(before)[concept_class], clf.classify(after)[concept_class],
               kl.kl_before, kl.kl_after};
  });

  Json per_seed = Json::array(), edit_list = Json::array();
  int reduced = 0;
  double kl_before = 0, kl_after = 0;
  for (const Row& r : rows) {
    per_seed.push_back({{"seed", r.seed},
                        {"mass_before", r.mass_before},
                        {"mass_after", r.mass_after},
                        {"kl_before", r.kl_before},
                        {"kl_after", r.kl_after}});
    reduced += r.mass_after < r.mass_before;
    kl_before += r.kl_before / n;
    kl_after += r.kl_after / n;
  }
  for (const MaskEdit& e : edits) {
    edit_list.push_back({{"l", e.l}, {"t_from", e.t_from}, {"t_to", e.t_to}, {"c", e.c}});
  }
  p.write_json("edit.json", {{"prompt_index", index},
                             {"token_ids", item.prompt},
                             {"edits", edit_list},
                             {"edited_token", target},
                             {"reference", reference},
                             {"per_seed", per_seed},
                             {"fraction_reduced", static_cast<double>(reduced) / n},
                             {"mean_kl_before", kl_before},
                             {"mean_kl_after", kl_after}});
  out << "edit: mass reduced in " << reduced << "/" << n << " seeds, KL " << fmt(kl_before)
      << " -> " << fmt(kl_after) << " -> " << p.path("edit.json").string() << "\n";
  return 0;
}

Json sign_json(const SignTest& s) {
  return {{"wins", s.wins}, {"losses", s.losses}, {"ties", s.ties}, {"p_value", s.p_value}};
}

std::vector<double> flatten(const std::vector<std::vector<double>>& cells) {
  std::vector<double> out;
  for (const auto& row : cells) out.insert(out.end(), row.begin(), row.end());
  return out;
}

int cmd_report(Pipeline& p, std::ostream& out) {
  p.require_fresh({"report.json"});
  const Benchmark& b = p.benchmark();
  std::vector<EvalReport> reports;
  if (p.has("eval_cells.json")) {
    const Json cells = p.read_own("eval_cells.json");
    for (const Json& r : cells.at("reports")) {
      reports.push_back(eval_report_from_json(r));
    }
  } else {
    std::string csv;
    reports = evaluate_all(p, false, &csv);
    if (!p.has("metrics.csv")) write_text_once(p.path("metrics.csv"), csv);
    p.write_json("eval_cells.json", reports_json(reports));
  }

  const std::vector<std::vector<int>> prompts = b.prompts();
  const std::vector<AudioSequence> audio = b.audio();
  Json methods = Json::object();
  const EvalReport* ours = nullptr;
  for (const EvalReport& r : reports) {
    if (r.method == "audiogenx") ours = &r;
    const ExplanationSet& set = p.explanations(r.method);
    const PlantedRelevance rel = planted_relevance(b.spec, prompts, audio, set.per_token);
    methods[r.method] = {{"fid_f", summary_json(r.fid_f)},
                         {"fid_cf", summary_json(r.fid_cf)},
                         {"kl_f", summary_json(r.kl_f)},
                         {"kl_cf", summary_json(r.kl_cf)},
                         {"size", summary_json(r.size)},
                         {"aggregate_auc", rel.aggregate_auc},
                         {"segments", rel.segments},
                         {"segment_rank_first_rate", rel.segment_rate()}};
  }

  Json report = {{"model_checksum", p.model().checksum()}, {"methods", methods}};
  if (ours) {
    // Paired over (prompt, seed) cells; a "win" is a difference in the
    // direction that favors the learned explainer.
    Json tests = Json::object();
    for (const EvalReport& r : reports) {
      if (&r == ours) continue;
      const auto ff = flatten(ours->factual.fid), bf = flatten(r.factual.fid);
      const auto fc = flatten(ours->counterfactual.fid), bc = flatten(r.counterfactual.fid);
      const auto kc = flatten(ours->counterfactual.kl), bk = flatten(r.counterfactual.kl);
      std::vector<double> d_ff, d_fc, d_kc;
      for (std::size_t i = 0; i < ff.size(); ++i) {
        d_ff.push_back(bf[i] - ff[i]);
        d_fc.push_back(fc[i] - bc[i]);
        d_kc.push_back(kc[i] - bk[i]);
      }
      tests[r.method] = {{"fid_f_lower", sign_json(sign_test(d_ff))},
                         {"fid_cf_higher", sign_json(sign_test(d_fc))},
                         {"kl_cf_higher", sign_json(sign_test(d_kc))}};
    }
    report["sign_tests_vs_audiogenx"] = tests;

    const ExplanationSet& set = p.explanations("audiogenx");
    Json table = Json::array();
    for (const TokenImportance& t : corpus_importance(prompts, set.aggregate)) {
      table.push_back(
          {{"token", token_name(b.spec, t.token)}, {"mean", t.mean}, {"count", t.count}});
    }
    report["corpus_importance"] = table;
  }
  const VarianceBaseline var =
      audio_variance_baseline(p.model(), p.classifier(), prompts, p.config().eval.n_seeds + 1,
                              b.spec.audio_length, eval_settings(p.config(), p.jobs()));
  report["audio_variance_baseline"] = {{"fid", var.fid}, {"kl", var.kl}};
  for (const char* name : {"sanity.json", "edit.json"}) {
    if (p.has(name)) report[fs::path(name).stem().string()] = p.read_own(name);
  }
  if (p.has("sweep.csv")) report["sweep_csv"] = read_text(p.path("sweep.csv"));
  p.write_json("report.json", report);
  out << "report: " << reports.size() << " methods -> " << p.path("report.json").string()
      << "\n";
  return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Counterfactual cross-attention explanations on a toy text-to-audio model",
               "xattn"};
  app.require_subcommand(1, 1);
  Options o;
  const std::vector<std::pair<const char*, const char*>> commands = {
      {"train-toy", "train the toy model and write model.json"},
      {"explain", "optimize per-token masks for every benchmark prompt"},
      {"baselines", "compute baseline attribution masks"},
      {"evaluate", "score every method's masks and write metrics.csv"},
      {"sweep", "sweep alpha and beta and write sweep.csv"},
      {"sanity", "compare masks of the trained and a randomized decoder"},
      {"edit", "re-weight masks and regenerate"},
      {"report", "collect metrics, tests and tables into report.json"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "run config (JSON)")->required();
    sub->add_option("--out", o.out, "output directory")->required();
    sub->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--timing", o.timing, "record wall-clock runtime in metrics.csv");
    if (std::string(name) == "edit") sub->add_option("--edits", o.edits, "edit spec (JSON)");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    Pipeline p(load_config(o.config), o);
    if (name == "train-toy") return cmd_train(p, out);
    if (name == "explain") return cmd_explain(p, out);
    if (name == "baselines") return cmd_baselines(p, out);
    if (name == "evaluate") return cmd_evaluate(p, o, out);
    if (name == "sweep") return cmd_sweep(p, out);
    if (name == "sanity") return cmd_sanity(p, out);
    if (name == "edit") return cmd_edit(p, o, out);
    return cmd_report(p, out);
  } catch (const ConfigError& e) {
    err << "xattn " << name << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "xattn " << name << ": " << e.what() << "\n";
    return 3;
  }
}

}  // namespace xattn

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "xattn/config.hpp"
#include "xattn/errors.hpp"
#include "xattn/harness.hpp"
#include "xattn/io.hpp"

using namespace xattn;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = XATTN_FIXTURE_DIR;

const char* kTiny = R"({"seed": 7, "train": {"n_prompts": 40, "epochs": 2},
  "explain": {"epochs": 3}, "eval": {"n_prompts": 3, "n_seeds": 2},
  "edit": {"n_seeds": 3}, "sweep": {"alphas": [0.1]}})";

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("xattn_test_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << text;
  return p;
}

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

std::string config_error(const Json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config defaults") {
  const RunConfig c = parse_config(Json{{"seed", 3}});
  CHECK(c.seed == 3);
  CHECK(c.task == ToyTaskSpec{});
  CHECK(c.explain.epochs == 50);
  CHECK(c.explain.lr == 1e-3);
  CHECK(c.explain.alpha == 1e-3);
  CHECK(c.explain.beta == 0.1);
  CHECK(c.eval.n_prompts == 20);
  CHECK(c.eval.n_seeds == 5);
  CHECK_FALSE(c.eval.same_seed);
  CHECK(c.edit.c == 0.1);
  CHECK(c.methods == all_methods());
  CHECK(c.explain.seed == stage_seed(c, SeedStream::explainer));
  CHECK(stage_seed(c, SeedStream::explainer) != stage_seed(c, SeedStream::evaluation));

  CHECK(c.hash() == parse_config(Json{{"seed", 3}}).hash());
  CHECK(c.hash().size() == 16);
  CHECK(c.hash() != parse_config(Json{{"seed", 4}}).hash());
  CHECK(c.hash() != parse_config(Json{{"seed", 3}, {"eval", {{"n_seeds", 4}}}}).hash());
}

TEST_CASE("config overrides and paths") {
  const Json j = {{"seed", 1},
                  {"explain", {{"alpha", 0.1}, {"epochs", 5}}},
                  {"methods", {"audiogenx", "random"}},
                  {"model_path", "m.json"}};
  const RunConfig c = parse_config(j, "/some/dir");
  CHECK(c.explain.alpha == 0.1);
  CHECK(c.explain.epochs == 5);
  CHECK(c.methods == std::vector<std::string>{"audiogenx", "random"});
  CHECK(c.model_path == fs::path("/some/dir/m.json"));
  CHECK(c.benchmark_path.empty());
  // The checkout location does not enter the hash.
  CHECK(c.hash() == parse_config(j, "/elsewhere").hash());
}

TEST_CASE("config errors name every bad field") {
  const std::string e = config_error(
      Json::parse(R"({"seed": 1, "explain": {"alpha": -1, "lr": "x"},
                      "eval": {"n_seeds": 0}, "bogus": 1})"));
  CHECK(e.find("explain.alpha") != std::string::npos);
  CHECK(e.find("explain.lr") != std::string::npos);
  CHECK(e.find("eval.n_seeds") != std::string::npos);
  CHECK(e.find("bogus: unknown field") != std::string::npos);

  CHECK(config_error(Json::object()).find("seed: is required") != std::string::npos);
  CHECK(config_error(Json{{"seed", -2}}).find("seed") != std::string::npos);
  CHECK(config_error(Json{{"seed", 1}, {"methods", {"rollout"}}}).find("unknown method") !=
        std::string::npos);
  CHECK(config_error(Json{{"seed", 1}, {"methods", {"random", "random"}}})
            .find("duplicate method") != std::string::npos);
  CHECK(config_error(Json{{"seed", 1}, {"model", {{"d_model", 30}}}}).find("model.d_model") !=
        std::string::npos);
  CHECK(config_error(Json{{"seed", 1}, {"edit", {{"c", 1.5}}}}).find("edit.c") !=
        std::string::npos);
  CHECK(config_error(Json{{"seed", 1}, {"task", {{"n_concepts", 0}}}}).find("task.n_concepts") !=
        std::string::npos);
  CHECK(config_error(Json::array()) != "");
}

TEST_CASE("seed override from the environment") {
  const fs::path dir = scratch("env");
  const fs::path p = write_config(dir, R"({"seed": 5})");
  CHECK(load_config(p).seed == 5);
  ::setenv("XATTN_SEED", "42", 1);
  CHECK(load_config(p).seed == 42);
  ::setenv("XATTN_SEED", "-1", 1);
  CHECK_THROWS_AS(load_config(p), ConfigError);
  ::unsetenv("XATTN_SEED");
  CHECK_THROWS_AS(load_config(dir / "missing.json"), ConfigError);
  std::ofstream(dir / "broken.json") << "{";
  CHECK_THROWS_AS(load_config(dir / "broken.json"), ConfigError);
}

TEST_CASE("command line exit codes") {
  const fs::path dir = scratch("cli");
  const fs::path good = write_config(dir, kTiny);
  CHECK(run({}).code == 2);
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"evaluate", "--config", good.string()}).code == 2);
  CHECK(run({"evaluate", "--config", good.string(), "--out", "x", "--jobs", "0"}).code == 2);

  const Outcome missing = run({"train-toy", "--config", (dir / "nope.json").string(), "--out",
                               (dir / "o").string()});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("does not exist") != std::string::npos);

  std::ofstream(dir / "bad.json") << R"({"seed": 1, "eval": {"n_seeds": 0}})";
  CHECK(run({"evaluate", "--config", (dir / "bad.json").string(), "--out", (dir / "o").string()})
            .code == 2);
}

TEST_CASE("pipeline is reproducible and write-once") {
  const fs::path dir = scratch("pipeline");
  const fs::path cfg = write_config(dir, kTiny);
  auto cmd = [&](const std::string& sub, const fs::path& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> args = {sub, "--config", cfg.string(), "--out", out.string()};
    args.insert(args.end(), extra.begin(), extra.end());
    const Outcome o = run(args);
    INFO(sub << ": " << o.err);
    return o.code;
  };

  const fs::path a = dir / "a", b = dir / "b";
  REQUIRE(cmd("train-toy", a) == 0);
  REQUIRE(cmd("evaluate", a) == 0);
  REQUIRE(cmd("train-toy", b) == 0);
  REQUIRE(cmd("evaluate", b, {"--jobs", "3"}) == 0);
  for (const char* name : {"model.json", "benchmark.json", "metrics.csv", "eval_cells.json",
                           "explanations_audiogenx.json", "explanations_chefer.json"}) {
    INFO(name);
    CHECK(read_text(a / name) == read_text(b / name));
  }

  const std::string csv = read_text(a / "metrics.csv");
  CHECK(csv.rfind("method,alpha,beta,n_prompts,n_seeds,fid_f,fid_cf,kl_f,kl_cf,size,runtime_s", 0) ==
        0);
  CHECK(csv.find(",NA,") != std::string::npos);  // runtime without --timing

  const std::string hash = load_config(cfg).hash();
  for (const char* name : {"model.json", "train_log.json", "benchmark.json",
                           "explanations_random.json", "eval_cells.json"}) {
    const Json j = read_json(a / name);
    CHECK(j.at("config_hash") == hash);
    CHECK(j.at("seed") == 7);
  }

  // Outputs are never overwritten.
  CHECK(cmd("train-toy", a) == 2);
  CHECK(cmd("evaluate", a) == 2);

  REQUIRE(cmd("sanity", a) == 0);
  REQUIRE(cmd("edit", a) == 0);
  REQUIRE(cmd("sweep", a) == 0);
  REQUIRE(cmd("report", a) == 0);
  const Json report = read_json(a / "report.json");
  CHECK(report.at("methods").size() == all_methods().size());
  CHECK(report.contains("sanity"));
  CHECK(report.contains("edit"));
  CHECK(report.contains("sign_tests_vs_audiogenx"));
  const Json edit = read_json(a / "edit.json");
  CHECK(edit.at("per_seed").size() == 3);

  // A directory written under another config is rejected.
  const fs::path other = write_config(dir / "other", R"({"seed": 8})");
  const Outcome mismatch = run({"report", "--config", other.string(), "--out", a.string()});
  CHECK(mismatch.code == 2);
}

TEST_CASE("explicit edits") {
  const fs::path dir = scratch("edits");
  const fs::path cfg = write_config(dir, kTiny);
  const fs::path out = dir / "run";
  REQUIRE(run({"train-toy", "--config", cfg.string(), "--out", out.string()}).code == 0);
  std::ofstream(dir / "edits.json") << R"([{"l": 0, "t_from": 1, "t_to": 4, "c": 0.9}])";
  std::ofstream(dir / "bad_edits.json") << R"([{"l": 99, "t_from": 1, "t_to": 4, "c": 0.9}])";
  CHECK(run({"edit", "--config", cfg.string(), "--out", out.string(), "--edits",
             (dir / "bad_edits.json").string()})
            .code != 0);
  const Outcome ok = run({"edit", "--config", cfg.string(), "--out", out.string(), "--edits",
                          (dir / "edits.json").string()});
  INFO(ok.err);
  REQUIRE(ok.code == 0);
  const Json e = read_json(out / "edit.json");
  CHECK(e.at("edits").size() == 1);
  CHECK(e.at("edits")[0].at("c") == 0.9);
}

TEST_CASE("committed fixtures resolve through the config") {
  const RunConfig c = load_config(kFixtures / "acceptance_config.json");
  CHECK(fs::exists(c.model_path));
  CHECK(fs::exists(c.benchmark_path));
  const Benchmark b = benchmark_from_json(read_json(c.benchmark_path));
  CHECK(b.items.size() == static_cast<std::size_t>(c.eval.n_prompts));
  CHECK(b.model_checksum == read_json(kFixtures / "toy_train_log.json").at("model_checksum"));
}

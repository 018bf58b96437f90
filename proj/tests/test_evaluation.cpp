#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "xattn/baselines.hpp"
#include "xattn/errors.hpp"
#include "xattn/evaluation.hpp"
#include "xattn/harness.hpp"
#include "xattn/io.hpp"

using namespace xattn;

namespace {

const std::filesystem::path kFixtures = XATTN_FIXTURE_DIR;

ToyTaskSpec small_spec() {
  ToyTaskSpec s;
  s.n_concepts = 2;
  s.n_fillers = 2;
  s.prompt_length = 3;
  s.audio_length = 8;
  s.segment_length = 4;
  s.range_width = 3;
  s.audio_vocab = 8;
  s.max_concepts_per_prompt = 2;
  return s;
}

struct Fixture {
  Model model;
  Benchmark bench;
};

const Fixture& fixture() {
  static const Fixture f{load_model(kFixtures / "toy_model.json"),
                         benchmark_from_json(read_json(kFixtures / "benchmark.json"))};
  return f;
}

// Items whose originals come from argmax decoding of the fixture model.
std::vector<EvalItem> argmax_items(std::size_t n, double fill) {
  const Fixture& f = fixture();
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<int>& prompt = f.bench.items[i].prompt;
    const PromptEmbedding u = encode_text(f.model, prompt);
    const int T = f.bench.spec.audio_length;
    AudioSequence z = generate(f.model, u, T, SamplingConfig{8, 0.0, 1}).audio;
    items.push_back({prompt, z, Tensor(T, prompt.size(), fill), 0});
  }
  return items;
}

std::vector<EvalItem> random_items(std::size_t n, std::uint64_t seed) {
  const Fixture& f = fixture();
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < n; ++i) {
    const BenchmarkItem& b = f.bench.items[i];
    const PromptEmbedding u = encode_text(f.model, b.prompt);
    items.push_back({b.prompt, b.audio,
                     baseline_masks("random", f.model, u, b.audio, mix_seed(seed, i)),
                     b.generation_seed});
  }
  return items;
}

double binomial_tail(int wins, int n) {
  // Exact integer coefficients; n stays small enough for doubles.
  double total = 0, coef = 1;
  for (int k = 0; k <= n; ++k) {
    if (k >= wins) total += coef;
    coef = coef * (n - k) / (k + 1);
  }
  return total / std::pow(2.0, n);
}

}  // namespace

TEST_CASE("classify histogram") {
  const ToyTaskSpec spec = small_spec();
  const ConceptClassifier q{spec, 1e-3};

  const auto peaked = q.classify(AudioSequence::single({3, 4, 5, 3, 4, 5}));
  CHECK(peaked.size() == 3);
  CHECK(peaked[1] >= 6.0 / (6.0 + 2 * 1e-3 + 1e-3));
  CHECK(peaked[0] == doctest::Approx(1e-3 / (6 + 3e-3)));

  const auto half = q.classify(AudioSequence::single({0, 1, 3, 4}));
  CHECK(half[0] == half[1]);
  CHECK(half[2] == doctest::Approx(1e-3 / (4 + 3e-3)));

  const auto background = q.classify(AudioSequence::single({6, 7, 6}));
  CHECK(argmax(background) == 2);

  // Both codebooks count.
  const auto two = q.classify(AudioSequence{{{0, 0}, {3, 6}}});
  CHECK(two[0] == doctest::Approx((2 + 1e-3) / (4 + 3e-3)));
  CHECK(two[1] == doctest::Approx(two[2]));

  RngStream rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> ids(1 + rng.below(20));
    for (int& id : ids) id = static_cast<int>(rng.below(8));
    const auto p = q.classify(AudioSequence::single(ids));
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(q.classify(AudioSequence::single(ids)) == p);
  }
  CHECK_THROWS_AS(q.classify(AudioSequence::single({})), ContractError);
}

TEST_CASE("kl divergence") {
  const std::vector<double> p = {0.5, 0.5}, q = {0.25, 0.75};
  CHECK(kl_divergence(p, q) == doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0)));
  CHECK(kl_divergence(p, p) == 0.0);
  const std::vector<double> r = {0.0, 1.0};
  CHECK(kl_divergence(r, q) == doctest::Approx(std::log(4.0 / 3.0)));
  CHECK_THROWS_AS(kl_divergence(p, std::vector<double>{1.0}), DimensionError);

  RngStream rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(5), b(5);
    for (double& v : a) v = rng.uniform_open();
    for (double& v : b) v = rng.uniform_open();
    const double sa = std::accumulate(a.begin(), a.end(), 0.0);
    const double sb = std::accumulate(b.begin(), b.end(), 0.0);
    for (double& v : a) v /= sa;
    for (double& v : b) v /= sb;
    CHECK(kl_divergence(a, b) >= 0.0);
  }
}

TEST_CASE("size metric") {
  const std::vector<Tensor> ones = {Tensor(3, 4, 1.0), Tensor(2, 5, 1.0)};
  CHECK(size_metric(ones) == 1.0);
  const std::vector<Tensor> zeros = {Tensor(3, 4, 0.0)};
  CHECK(size_metric(zeros) == 0.0);
  const std::vector<Tensor> mixed = {Tensor(1, 2, 1.0), Tensor(1, 2, 0.0)};
  CHECK(size_metric(mixed) == 0.5);

  RngStream rng(12);
  Tensor u(1000, 100);
  for (double& v : u.data()) v = rng.uniform();
  const std::vector<Tensor> uniform = {u};
  CHECK(std::abs(size_metric(uniform) - 0.5) <= 0.01);
  CHECK_THROWS_AS(size_metric(std::vector<Tensor>{}), ContractError);
}

TEST_CASE("cell statistics") {
  const std::vector<std::vector<double>> cells = {{1, 2}, {3, 6}};
  CHECK(cell_mean(cells) == 3.0);
  // sample sd of {1,2,3,6} is sqrt(14/3); stderr divides by sqrt(4)
  CHECK(cell_stderr(cells) == doctest::Approx(std::sqrt(14.0 / 3.0) / 2.0));
  CHECK(cell_stderr({{5.0}}) == 0.0);
  CHECK_THROWS_AS(cell_mean({}), ContractError);
}

TEST_CASE("identity injections give zero scores under argmax decoding") {
  const ConceptClassifier q{fixture().bench.spec};
  EvalSettings s;
  s.n_seeds = 3;
  s.temperature = 0.0;
  s.seed = 5;

  const auto ones = argmax_items(6, 1.0);
  const CellScores f = injection_scores(fixture().model, q, ones, InjectionMode::factual, s);
  for (const auto& row : f.fid)
    for (double v : row) CHECK(v == 0.0);
  for (const auto& row : f.kl)
    for (double v : row) CHECK(v == 0.0);

  const auto zeros = argmax_items(6, 0.0);
  CHECK(fidelity(fixture().model, q, zeros, InjectionMode::counterfactual, s) == 0.0);
  CHECK(kl_metric(fixture().model, q, zeros, InjectionMode::counterfactual, s) == 0.0);
}

TEST_CASE("same_seed replays the original sampling seed") {
  const Fixture& f = fixture();
  const ConceptClassifier q{f.bench.spec};
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < 5; ++i) {
    const BenchmarkItem& b = f.bench.items[i];
    items.push_back({b.prompt, b.audio, Tensor(b.audio.length(), b.prompt.size(), 1.0),
                     b.generation_seed});
  }
  EvalSettings s;
  s.n_seeds = 2;
  s.top_k = f.bench.top_k;
  s.temperature = f.bench.temperature;
  s.same_seed = true;
  CHECK(regeneration_seed(s, 3, 1, 77) == 77);
  const CellScores same = injection_scores(f.model, q, items, InjectionMode::factual, s);
  for (const auto& row : same.kl)
    for (double v : row) CHECK(v == 0.0);

  s.same_seed = false;
  CHECK(regeneration_seed(s, 3, 1, 77) != 77);
  CHECK(regeneration_seed(s, 3, 1) != regeneration_seed(s, 3, 2));
  CHECK(regeneration_seed(s, 2, 1) != regeneration_seed(s, 3, 1));
}

TEST_CASE("evaluation is reproducible, bounded and worker-count independent") {
  const Fixture& f = fixture();
  const ConceptClassifier q{f.bench.spec};
  const auto items = random_items(6, 3);
  EvalSettings s;
  s.n_seeds = 3;
  s.seed = 21;
  const EvalReport a = evaluate_masks("random", f.model, q, items, s);
  s.jobs = 3;
  const EvalReport b = evaluate_masks("random", f.model, q, items, s);
  CHECK(a.factual.fid == b.factual.fid);
  CHECK(a.counterfactual.kl == b.counterfactual.kl);
  CHECK(a.size.mean == b.size.mean);
  for (const CellScores* c : {&a.factual, &a.counterfactual}) {
    for (const auto& row : c->fid)
      for (double v : row) CHECK((v >= -1.0 && v <= 1.0));
    for (const auto& row : c->kl)
      for (double v : row) CHECK(v >= 0.0);
  }
  CHECK((a.size.mean >= 0.0 && a.size.mean <= 1.0));
  CHECK(a.n_prompts == 6);
  CHECK(a.n_seeds == 3);

  std::vector<EvalItem> bad = items;
  bad[0].masks = Tensor(2, 2, 1.0);
  CHECK_THROWS_AS(evaluate_masks("random", f.model, q, bad, s), ContractError);
  CHECK_THROWS_AS(fidelity(f.model, q, std::vector<EvalItem>{}, InjectionMode::factual, s),
                  ContractError);
}

TEST_CASE("every method regenerates through the shared injection path") {
  const Fixture& f = fixture();
  const ConceptClassifier q{f.bench.spec};
  const auto items = random_items(2, 8);
  EvalSettings s;
  s.n_seeds = 2;
  reset_injection_path_counts();
  for (const std::string& m : {"random", "audiogenx", "chefer"}) evaluate_masks(m, f.model, q, items, s);
  const auto counts = injection_path_counts();
  for (const std::string& m : {"random", "audiogenx", "chefer"}) {
    REQUIRE(counts.count(m));
    CHECK(counts.at(m) == 2 * 2 * 2);
  }
}

TEST_CASE("audio variance baseline") {
  const Fixture& f = fixture();
  const ConceptClassifier q{f.bench.spec};
  const auto prompts = f.bench.prompts();
  const std::vector<std::vector<int>> some(prompts.begin(), prompts.begin() + 4);
  EvalSettings s;
  s.temperature = 0.0;
  const VarianceBaseline zero = audio_variance_baseline(f.model, q, some, 3, 16, s);
  CHECK(zero.fid == 0.0);
  CHECK(zero.kl == 0.0);

  s.temperature = 1.0;
  s.same_seed = true;  // ignored: the baseline always draws fresh seeds
  const VarianceBaseline noisy = audio_variance_baseline(f.model, q, some, 4, 16, s);
  CHECK(noisy.kl > 0.0);
  CHECK(std::abs(noisy.fid) <= 1.0);
  CHECK_THROWS_AS(audio_variance_baseline(f.model, q, some, 1, 16, s), ParameterError);
}

TEST_CASE("average ranks and spearman") {
  const std::vector<double> v = {10, 20, 20, 30};
  CHECK(average_ranks(v) == std::vector<double>{1, 2.5, 2.5, 4});
  const std::vector<double> w = {3, 1, 2};
  CHECK(average_ranks(w) == std::vector<double>{3, 1, 2});

  const std::vector<double> up = {1, 2, 3, 4}, down = {9, 7, 5, 1};
  CHECK(*spearman(up, up) == doctest::Approx(1.0));
  CHECK(*spearman(up, down) == doctest::Approx(-1.0));
  CHECK_FALSE(spearman(up, std::vector<double>{2, 2, 2, 2}).has_value());
  CHECK_THROWS_AS(spearman(up, w), DimensionError);

  // Without ties the rank formula 1 - 6 sum d^2 / (n (n^2 - 1)) applies.
  RngStream rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3 + rng.below(10);
    std::vector<double> a(n), b(n);
    for (double& x : a) x = rng.uniform();
    for (double& x : b) x = rng.uniform();
    const auto ra = average_ranks(a), rb = average_ranks(b);
    double d2 = 0;
    for (std::size_t i = 0; i < n; ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
    const double nn = static_cast<double>(n);
    CHECK(*spearman(a, b) == doctest::Approx(1 - 6 * d2 / (nn * (nn * nn - 1))).epsilon(1e-12));
  }
}

TEST_CASE("sanity check bookkeeping") {
  const Fixture& f = fixture();
  const auto prompts = f.bench.prompts();
  const auto audio = f.bench.audio();
  const std::vector<std::vector<int>> p(prompts.begin(), prompts.begin() + 3);
  const std::vector<AudioSequence> z(audio.begin(), audio.begin() + 3);

  // A model-independent explainer yields identical masks for both models.
  const AggregateFn by_position = [](const Model&, const PromptEmbedding& u, const AudioSequence&,
                                     std::size_t) {
    std::vector<double> m(u.rows.rows());
    for (std::size_t l = 0; l < m.size(); ++l) m[l] = std::sin(1.0 + 3.0 * l);
    return m;
  };
  const SanityReport same = sanity_check(f.model, by_position, p, z, 4);
  for (const auto& rho : same.correlations) CHECK(*rho == doctest::Approx(1.0));
  CHECK(same.mean_abs_correlation == doctest::Approx(1.0));
  CHECK(same.degenerate == 0);
  CHECK(same.randomized_mask_variance > 0.0);

  const AggregateFn constant = [](const Model&, const PromptEmbedding& u, const AudioSequence&,
                                  std::size_t) { return std::vector<double>(u.rows.rows(), 0.5); };
  const SanityReport flat = sanity_check(f.model, constant, p, z, 4);
  CHECK(flat.degenerate == 3);
  for (const auto& rho : flat.correlations) CHECK_FALSE(rho.has_value());
  CHECK(flat.randomized_mask_variance == 0.0);

  int trained = 0, randomized = 0;
  const AggregateFn spy = [&](const Model& m, const PromptEmbedding& u, const AudioSequence&,
                              std::size_t) {
    (m == f.model ? trained : randomized) += 1;
    return std::vector<double>(u.rows.rows(), 0.0);
  };
  sanity_check(f.model, spy, p, z, 4);
  CHECK(trained == 3);
  CHECK(randomized == 3);
}

TEST_CASE("corpus importance") {
  const std::vector<std::vector<int>> one = {{4, 1, 7}};
  const std::vector<std::vector<double>> agg = {{0.2, 0.9, 0.5}};
  const auto table = corpus_importance(one, agg, 1);
  REQUIRE(table.size() == 3);
  CHECK(table[0].token == 1);
  CHECK(table[0].mean == 0.9);
  CHECK(table[1].token == 7);
  CHECK(table[2].token == 4);

  const std::vector<std::vector<int>> two = {{1, 2}, {1, 3}};
  const std::vector<std::vector<double>> agg2 = {{0.4, 0.1}, {0.8, 0.3}};
  const auto t2 = corpus_importance(two, agg2, 2);
  REQUIRE(t2.size() == 1);
  CHECK(t2[0].token == 1);
  CHECK(t2[0].count == 2);
  CHECK(t2[0].mean == doctest::Approx(0.6));
  CHECK(std::none_of(t2.begin(), t2.end(), [](const TokenImportance& t) { return t.token == 5; }));
  CHECK_THROWS_AS(corpus_importance(two, agg, 1), ContractError);
}

TEST_CASE("roc auc") {
  const std::vector<double> labels = {0, 1, 0, 1, 1};
  CHECK(*roc_auc(labels, labels) == 1.0);
  const std::vector<double> s = {0.1, 0.35, 0.4, 0.8, 0.5};
  // positives {0.35, 0.8, 0.5} vs negatives {0.1, 0.4}: 5 of 6 pairs won
  CHECK(*roc_auc(s, labels) == doctest::Approx(5.0 / 6.0));
  CHECK(*roc_auc(std::vector<double>(5, 0.3), labels) == 0.5);
  CHECK_FALSE(roc_auc(s, std::vector<double>(5, 1.0)).has_value());
  CHECK_FALSE(roc_auc(s, std::vector<double>(5, 0.0)).has_value());

  const Tensor lab = Tensor::from_rows({{1, 0, 0}, {1, 1, 1}, {0, 0, 1}});
  const Tensor sc = Tensor::from_rows({{0.9, 0.1, 0.2}, {0.1, 0.2, 0.3}, {0.5, 0.6, 0.1}});
  const AucSummary a = relevance_auc(sc, lab);
  CHECK(a.skipped == 1);
  CHECK_FALSE(a.values[1].has_value());
  CHECK(a.mean == doctest::Approx(0.5));
  CHECK_THROWS_AS(relevance_auc(sc, Tensor(2, 3)), DimensionError);
}

TEST_CASE("random masks score chance relevance") {
  const Fixture& f = fixture();
  const auto items = random_items(20, 17);
  double total = 0;
  int n = 0;
  for (const EvalItem& item : items) {
    const Tensor labels = relevance_labels(f.bench.spec, item.prompt, item.original);
    const AucSummary a = relevance_auc(item.masks, labels);
    if (a.skipped < static_cast<int>(labels.rows())) {
      total += a.mean;
      ++n;
    }
  }
  REQUIRE(n > 10);
  CHECK(std::abs(total / n - 0.5) <= 0.1);
}

TEST_CASE("planted relevance on a hand-built case") {
  const ToyTaskSpec spec = small_spec();
  const std::vector<std::vector<int>> prompts = {{0, 2, 1}, {0, 3, 2}};
  const std::vector<AudioSequence> audio = {AudioSequence::single({0, 1, 2, 0, 3, 4, 5, 3}),
                                            AudioSequence::single({0, 1, 6, 2, 1, 0, 7, 2})};
  std::vector<Tensor> exact;
  for (std::size_t i = 0; i < 2; ++i) exact.push_back(relevance_labels(spec, prompts[i], audio[i]));
  CHECK(exact[0](0, 0) == 1.0);
  CHECK(exact[0](4, 2) == 1.0);
  CHECK(exact[0](4, 0) == 0.0);

  const PlantedRelevance good = planted_relevance(spec, prompts, audio, exact);
  // The second prompt hears only its first token; it scores but has no segments.
  CHECK(good.aggregate_scored == 2);
  CHECK(good.aggregate_auc == 1.0);
  CHECK(good.segments == 2);  // only the two-concept prompt has segments
  CHECK(good.segments_ranked_first == 2);
  CHECK(good.segment_rate() == 1.0);

  // Swapping the two concept columns keeps aggregates but misranks segments.
  std::vector<Tensor> swapped = exact;
  for (std::size_t t = 0; t < 8; ++t) std::swap(swapped[0](t, 0), swapped[0](t, 2));
  const PlantedRelevance bad = planted_relevance(spec, prompts, audio, swapped);
  CHECK(bad.aggregate_auc == 1.0);
  CHECK(bad.segments_ranked_first == 0);

  // A tie with another concept token does not count as first.
  const std::vector<Tensor> flat = {Tensor(8, 3, 0.5), Tensor(8, 3, 0.5)};
  CHECK(planted_relevance(spec, prompts, audio, flat).segments_ranked_first == 0);
  CHECK_THROWS_AS(planted_relevance(spec, prompts, audio, std::vector<Tensor>{exact[0]}),
                  ContractError);
}

TEST_CASE("sign test matches the binomial tail") {
  const std::vector<double> d = {1, 1, 1, 1, 1, 1, 1, 1, 1, -1, 0, 0};
  const SignTest s = sign_test(d);
  CHECK(s.wins == 9);
  CHECK(s.losses == 1);
  CHECK(s.ties == 2);
  CHECK(s.p_value == doctest::Approx(11.0 / 1024.0).epsilon(1e-12));
  CHECK(sign_test(std::vector<double>{0, 0}).p_value == 1.0);
  CHECK(sign_test(std::vector<double>{-1, -2}).p_value == doctest::Approx(1.0));

  RngStream rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> diffs(1 + rng.below(40));
    for (double& x : diffs) x = static_cast<double>(rng.below(3)) - 1.0;
    const SignTest t = sign_test(diffs);
    const int n = t.wins + t.losses;
    if (n == 0) continue;
    CHECK(t.p_value == doctest::Approx(binomial_tail(t.wins, n)).epsilon(1e-9));
  }
}

TEST_CASE("sweep") {
  const Fixture& f = fixture();
  const ConceptClassifier q{f.bench.spec};
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < 2; ++i) {
    const BenchmarkItem& b = f.bench.items[i];
    AudioSequence z = b.audio.prefix(6);
    items.push_back({b.prompt, z, Tensor(6, b.prompt.size(), 1.0), b.generation_seed});
  }
  ExplainHyper hyper;
  hyper.epochs = 3;
  hyper.seed = 4;
  EvalSettings s;
  s.n_seeds = 2;
  s.seed = 6;
  const std::vector<double> alphas = {0.1}, betas = {0.1};
  const auto cells = sweep(f.model, q, items, alphas, betas, hyper, s);
  REQUIRE(cells.size() == 1);

  // A single cell equals explaining and evaluating directly.
  hyper.alpha = 0.1;
  hyper.beta = 0.1;
  std::vector<Tensor> masks;
  for (EvalItem& item : items) {
    item.masks = explain_sequence(f.model, encode_text(f.model, item.prompt), item.original, hyper)
                     .per_token;
    masks.push_back(item.masks);
  }
  CHECK(cells[0].fid_f == fidelity(f.model, q, items, InjectionMode::factual, s));
  CHECK(cells[0].size == size_metric(masks));

  const std::vector<double> two = {0.1, 1e-3};
  const auto grid = sweep(f.model, q, items, two, betas, hyper, s);
  CHECK(grid.size() == 2);
  CHECK(sweep(f.model, q, items, two, betas, hyper, s)[1].size == grid[1].size);
  CHECK_THROWS_AS(sweep(f.model, q, items, std::vector<double>{}, betas, hyper, s), ContractError);

  const std::string csv = sweep_csv(grid, "abc", 9);
  CHECK(csv.rfind("alpha,beta,fid_f,size,config_hash,seed\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.find(",abc,9\n") != std::string::npos);
}

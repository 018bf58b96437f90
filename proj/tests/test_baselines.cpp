#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "xattn/baselines.hpp"
#include "xattn/errors.hpp"
#include "xattn/evaluation.hpp"
#include "xattn/ops.hpp"

using namespace xattn;

namespace {

ModelConfig toy_config(int layers, int heads, int codebooks = 1) {
  ModelConfig c;
  c.text_vocab = 6;
  c.audio_vocab = 7;
  c.d_text = 5;
  c.n_heads = heads;
  c.d_head = 3;
  c.d_model = heads * 3;
  c.d_ff = 6;
  c.n_layers = layers;
  c.n_codebooks = codebooks;
  c.max_seq_len = 8;
  c.max_prompt_len = 5;
  return c;
}

struct Case {
  Model model;
  PromptEmbedding prompt;
  AudioSequence audio;
};

Case make_case(std::uint64_t seed, int layers, int heads, int codebooks = 1,
               std::size_t prompt_len = 4) {
  Case c;
  c.model = Model::initialize(toy_config(layers, heads, codebooks), seed);
  RngStream rng(seed * 7 + 1);
  std::vector<int> ids(prompt_len);
  for (int& id : ids) id = static_cast<int>(rng.below(6));
  c.prompt = encode_text(c.model, ids);
  c.audio = generate(c.model, c.prompt, 6, SamplingConfig{5, 1.0, seed}).audio;
  return c;
}

double target_value(const std::vector<Tensor>& logits, const AudioSequence& audio, std::size_t t) {
  double y = 0;
  for (std::size_t cb = 0; cb < logits.size(); ++cb) y += logits[cb](0, audio.codebooks[cb][t - 1]);
  return y / static_cast<double>(logits.size());
}

struct Run {
  std::vector<Tensor> logits;
  std::vector<std::vector<Tensor>> cross;
};

Run run(const Case& c, std::size_t t, ForwardOptions options) {
  Tape tape;
  const BoundModel bound = BoundModel::frozen(c.model, tape);
  options.capture_attention = true;
  const ForwardResult r =
      forward_latent(bound, tape.constant(c.prompt.rows), c.audio.prefix(t - 1), options);
  Run out;
  for (const Var& v : r.logits) out.logits.push_back(v.value());
  for (const auto& layer : r.cross_attention) {
    out.cross.emplace_back();
    for (const Var& m : layer) out.cross.back().push_back(m.value());
  }
  return out;
}

// d(target)/d(A[layer][head](i, j)) by central differences on the map.
double map_derivative(const Case& c, std::size_t t, int layer, int head, std::size_t i,
                      std::size_t j, double h = 1e-6) {
  auto value = [&](double delta) {
    ForwardOptions o;
    o.cross_probs_hook = [&](int l, int hh, Tensor& probs) {
      if (l == layer && hh == head) probs(i, j) += delta;
    };
    return target_value(run(c, t, o).logits, c.audio, t);
  };
  return (value(h) - value(-h)) / (2 * h);
}

std::vector<double> fd_gradcam_e(const Case& c, std::size_t t, bool last_row_only) {
  const int layer = c.model.config().n_layers - 1, heads = c.model.config().n_heads;
  const std::vector<Tensor> maps = run(c, t, {}).cross[layer];
  const std::size_t rows = maps[0].rows(), L = maps[0].cols();
  std::vector<double> s(L, 0.0);
  const std::size_t first = last_row_only ? rows - 1 : 0;
  for (int h = 0; h < heads; ++h)
    for (std::size_t i = first; i < rows; ++i)
      for (std::size_t j = 0; j < L; ++j)
        s[j] += std::max(0.0, map_derivative(c, t, layer, h, i, j) * maps[h](i, j));
  for (double& v : s) v /= heads * static_cast<double>(rows - first);
  return max_scale(s);
}

double cross_entropy(const std::vector<Tensor>& logits, const AudioSequence& audio, std::size_t t) {
  double total = 0;
  for (std::size_t cb = 0; cb < logits.size(); ++cb) {
    double z = 0;
    for (std::size_t k = 0; k < logits[cb].cols(); ++k) z += std::exp(logits[cb](0, k));
    total += std::log(z) - logits[cb](0, audio.codebooks[cb][t - 1]);
  }
  return total;
}

}  // namespace

TEST_CASE("random mask") {
  CHECK(random_mask(6, 3) == random_mask(6, 3));
  CHECK(random_mask(6, 3) != random_mask(6, 4));
  const std::vector<double> big = random_mask(100000, 42);
  const double mean = std::accumulate(big.begin(), big.end(), 0.0) / big.size();
  CHECK(std::abs(mean - 0.5) < 0.01);
  CHECK(*std::min_element(big.begin(), big.end()) >= 0);
  CHECK(*std::max_element(big.begin(), big.end()) <= 1);
  CHECK_THROWS_AS(random_mask(0, 1), ContractError);
}

TEST_CASE("property: scaling conventions") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    RngStream rng(seed);
    std::vector<double> v(1 + rng.below(9));
    for (double& x : v) x = rng.normal();
    const std::vector<double> mx = max_scale(v), mm = minmax_scale(v);
    const double top = *std::max_element(v.begin(), v.end());
    if (top > 0) CHECK(*std::max_element(mx.begin(), mx.end()) == 1.0);
    for (double x : mx) CHECK(x <= 1.0);
    for (double x : mm) {
      CHECK(x >= 0);
      CHECK(x <= 1);
    }
  }
  CHECK(max_scale({-1.0, -2.0}) == std::vector<double>{0.0, 0.0});
  CHECK(minmax_scale({3.0, 3.0}) == std::vector<double>{0.0, 0.0});
}

TEST_CASE("positive part of gradient-weighted maps") {
  Tensor a(2, 3, 0.5), g(2, 3, -1.0);
  const Tensor zero = positive_grad_map({a}, {g});
  for (double v : zero.data()) CHECK(v == 0.0);
  g(1, 2) = 4.0;
  const Tensor e = positive_grad_map({a, a}, {g, Tensor(2, 3, 1.0)});
  CHECK(e(1, 2) == doctest::Approx((2.0 + 0.5) / 2));
  CHECK(e(0, 0) == doctest::Approx(0.25));
  CHECK_THROWS_AS(positive_grad_map({a}, {}), ContractError);
}

TEST_CASE("Grad-CAM-e matches a finite-difference oracle on the attention map") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Case c = make_case(seed, 1 + seed % 2, 1 + seed % 2, 1 + (seed == 3));
    for (std::size_t t : {1u, 4u}) {
      const std::vector<double> got = gradcam_e(c.model, c.prompt, c.audio, t).scores;
      const std::vector<double> want = fd_gradcam_e(c, t, false);
      for (std::size_t j = 0; j < got.size(); ++j) CHECK(got[j] == doctest::Approx(want[j]).epsilon(1e-6));
      const std::vector<double> last =
          gradcam_e(c.model, c.prompt, c.audio, t, GradCamOptions{true}).scores;
      const std::vector<double> last_want = fd_gradcam_e(c, t, true);
      for (std::size_t j = 0; j < last.size(); ++j) {
        CHECK(last[j] == doctest::Approx(last_want[j]).epsilon(1e-6));
      }
    }
  }
  const Case single = make_case(9, 1, 1, 1, 1);
  const std::vector<double> s = gradcam_e(single.model, single.prompt, single.audio, 3).scores;
  CHECK(s.size() == 1);
  CHECK((s[0] == 1.0 || s[0] == 0.0));
}

TEST_CASE("Grad-CAM-a matches a hand-computed channel oracle") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Case c = make_case(seed + 20, 1 + seed % 2, 2, 1 + seed % 2);
    const ModelConfig& cfg = c.model.config();
    const std::size_t t = 2 + seed;
    const Run base = run(c, t, {});
    // The logits are linear in the final normalized state, so d(target)/d(e_t)
    // is the codebook mean of the head columns of the realized tokens.
    std::vector<double> grad(cfg.d_model, 0.0);
    for (int cb = 0; cb < cfg.n_codebooks; ++cb) {
      const Tensor& w = c.model.param("head." + std::to_string(cb) + ".w");
      const int z = c.audio.codebooks[cb][t - 1];
      for (int k = 0; k < cfg.d_model; ++k) grad[k] += w(k, z) / cfg.n_codebooks;
    }
    const std::vector<Tensor>& a = base.cross.back();
    const Tensor& wv = c.model.param("layer" + std::to_string(cfg.n_layers - 1) + ".cross.v");
    const Tensor& wo = c.model.param("layer" + std::to_string(cfg.n_layers - 1) + ".cross.o");
    const std::size_t L = c.prompt.length();
    std::vector<double> want(L, 0.0);
    for (std::size_t j = 0; j < L; ++j) {
      double s = 0;
      for (int ch = 0; ch < cfg.d_model; ++ch) {
        double contrib = 0;
        for (int h = 0; h < cfg.n_heads; ++h)
          for (int q = 0; q < cfg.d_head; ++q) {
            double v = 0;
            for (int k = 0; k < cfg.d_text; ++k) v += c.prompt.rows(j, k) * wv(k, h * cfg.d_head + q);
            contrib += a[h](a[h].rows() - 1, j) * v * wo(h * cfg.d_head + q, ch);
          }
        s += grad[ch] * contrib;
      }
      want[j] = std::max(0.0, s / cfg.d_model);
    }
    want = max_scale(want);
    const std::vector<double> got = gradcam_a(c.model, c.prompt, c.audio, t).scores;
    for (std::size_t j = 0; j < L; ++j) CHECK(got[j] == doctest::Approx(want[j]).epsilon(1e-5));
    CHECK(gradcam_a(c.model, c.prompt, c.audio, t).scores == got);
  }

  Case detached = make_case(5, 2, 2);
  for (double& v : detached.model.param("head.0.w").data()) v = 0;
  for (double v : gradcam_a(detached.model, detached.prompt, detached.audio, 3).scores) {
    CHECK(v == 0.0);
  }
}

TEST_CASE("pre-softmax column scaling multiplies the scores of one column") {
  // Two captures (factor 1 and factor 0 on column j) pin the absolute scores
  // of a row; they then predict the map under any other factor.
  const Case c = make_case(31, 2, 2);
  const std::size_t t = 4, j = 1, L = c.prompt.length();
  std::vector<double> zero(L, 1.0), part(L, 1.0);
  zero[j] = 0.0;
  part[j] = 0.35;
  ForwardOptions o0, o1;
  o0.pre_softmax_column_scale = zero;
  o1.pre_softmax_column_scale = part;
  const Tensor p = run(c, t, {}).cross[0][1];
  const Tensor q = run(c, t, o0).cross[0][1];
  const Tensor r = run(c, t, o1).cross[0][1];
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const std::size_t ref = j == 0 ? 1 : 0;
    std::vector<double> s(L);
    s[ref] = -std::log(q(i, j) / q(i, ref));
    for (std::size_t l = 0; l < L; ++l) {
      if (l != ref) s[l] = std::log(p(i, l) / p(i, ref)) + s[ref];
    }
    s[j] *= 0.35;
    double z = 0;
    for (double v : s) z += std::exp(v);
    for (std::size_t l = 0; l < L; ++l) CHECK(r(i, l) == doctest::Approx(std::exp(s[l]) / z).epsilon(1e-9));
  }
}

TEST_CASE("AtMan") {
  SUBCASE("independent forward oracle") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const Case c = make_case(seed + 40, 2, 2, 1 + seed % 2);
      const std::size_t t = 3, L = c.prompt.length();
      const double base = cross_entropy(run(c, t, {}).logits, c.audio, t);
      const std::vector<double> raw = atman_raw(c.model, c.prompt, c.audio, t, 0.9);
      std::vector<double> want(L);
      for (std::size_t j = 0; j < L; ++j) {
        ForwardOptions o;
        o.pre_softmax_column_scale.assign(L, 1.0);
        o.pre_softmax_column_scale[j] = 0.1;
        want[j] = cross_entropy(run(c, t, o).logits, c.audio, t) - base;
        CHECK(raw[j] == doctest::Approx(want[j]).epsilon(1e-9));
      }
      const std::vector<double> scaled = atman(c.model, c.prompt, c.audio, t).scores;
      const auto [lo, hi] = std::minmax_element(want.begin(), want.end());
      for (std::size_t j = 0; j < L; ++j) {
        CHECK(scaled[j] == doctest::Approx((want[j] - *lo) / (*hi - *lo)).epsilon(1e-6));
      }
    }
  }
  SUBCASE("k = 0 is no perturbation") {
    const Case c = make_case(44, 2, 1);
    for (double v : atman_raw(c.model, c.prompt, c.audio, 2, 0.0)) CHECK(v == 0.0);
    for (double v : atman(c.model, c.prompt, c.audio, 2, 0.0).scores) CHECK(v == 0.0);
    CHECK_THROWS_AS(atman(c.model, c.prompt, c.audio, 2, 1.5), ParameterError);
  }
  SUBCASE("identical tokens without positions score equally") {
    Case c = make_case(45, 2, 2);
    for (double& v : c.model.param("text.pos").data()) v = 0;
    c.prompt = encode_text(c.model, std::vector<int>{3, 3});
    const std::vector<double> raw = atman_raw(c.model, c.prompt, c.audio, 4, 0.9);
    CHECK(raw[0] == doctest::Approx(raw[1]).epsilon(1e-12));
  }
  SUBCASE("property: equivariant under consistent prompt permutation") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Case c = make_case(seed + 60, 1 + seed % 2, 2);
      for (double& v : c.model.param("text.pos").data()) v = 0;
      const std::vector<int> ids = c.prompt.token_ids;
      std::vector<std::size_t> perm(ids.size());
      std::iota(perm.begin(), perm.end(), 0);
      RngStream rng(seed);
      for (std::size_t i = perm.size(); i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);
      std::vector<int> permuted(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) permuted[i] = ids[perm[i]];
      const std::vector<double> a =
          atman_raw(c.model, encode_text(c.model, ids), c.audio, 5, 0.9);
      const std::vector<double> b =
          atman_raw(c.model, encode_text(c.model, permuted), c.audio, 5, 0.9);
      for (std::size_t i = 0; i < ids.size(); ++i) CHECK(b[i] == doctest::Approx(a[perm[i]]).epsilon(1e-9));
    }
  }
}

TEST_CASE("Chefer reduces to Grad-CAM-e with one layer, one head and one query row") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Case c = make_case(seed + 80, 1, 1);
    const std::vector<double> chef = chefer(c.model, c.prompt, c.audio, 1).scores;
    const std::vector<double> grad = gradcam_e(c.model, c.prompt, c.audio, 1).scores;
    for (std::size_t j = 0; j < chef.size(); ++j) CHECK(chef[j] == doctest::Approx(grad[j]).epsilon(1e-12));
  }
  const Case c = make_case(99, 2, 2);
  CHECK(chefer(c.model, c.prompt, c.audio, 5).scores == chefer(c.model, c.prompt, c.audio, 5).scores);
}

TEST_CASE("property: every baseline yields length-L masks in [0, 1]") {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const Case c = make_case(seed + 100, 1 + seed % 2, 1 + seed % 2, 1 + seed % 3 / 2);
    for (const std::string& m : baseline_methods()) {
      const Tensor masks = baseline_masks(m, c.model, c.prompt, c.audio, seed);
      CHECK(masks.rows() == c.audio.length());
      CHECK(masks.cols() == c.prompt.length());
      for (double v : masks.data()) {
        CHECK(v >= 0);
        CHECK(v <= 1);
      }
      CHECK(baseline_masks(m, c.model, c.prompt, c.audio, seed) == masks);
    }
  }
}

TEST_CASE("method registry") {
  const auto& names = baseline_methods();
  CHECK(names.size() == 5);
  CHECK(std::find(names.begin(), names.end(), "rollout") == names.end());
  const Case c = make_case(1, 1, 1);
  CHECK_THROWS_AS(baseline_masks("rollout", c.model, c.prompt, c.audio, 0), ConfigError);
  CHECK_THROWS_AS(gradcam_e(c.model, c.prompt, c.audio, 0), ContractError);
  CHECK_THROWS_AS(chefer(c.model, c.prompt, c.audio, 7), ContractError);
}

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "ctsft/errors.hpp"
#include "ctsft/model.hpp"
#include "ctsft/tolerances.hpp"
#include "reference_model.hpp"
#include "test_helpers.hpp"

using namespace ctsft;
using ctsft::testing::small_config;

namespace {

// 1 layer, 1 head, d_model 2, identity value/output maps and a zero MLP.
Parameters hand_linear_model() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_model = 2;
  c.d_mlp = 1;
  c.vocab_size = 3;
  c.max_seq_len = 4;
  c.linear_mode = true;
  c.label_tokens = {1, 2};
  Parameters p(c);
  auto emb = p.tensor("tok_emb");
  emb[0] = 1.0F;  // token 0 -> (1, 0)
  emb[3] = 1.0F;  // token 1 -> (0, 1)
  auto wv = p.tensor("blocks.0.attn.wv");
  auto wo = p.tensor("blocks.0.attn.wo");
  wv[0] = wv[3] = 1.0F;
  wo[0] = wo[3] = 1.0F;
  auto wu = p.tensor("unembed");
  wu[2] = 1.0F;  // token 1 row (1, 2)
  wu[3] = 2.0F;
  wu[4] = 3.0F;  // token 2 row (3, -1)
  wu[5] = -1.0F;
  return p;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = small_config();
  c.d_model = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.label_tokens = {3, 99};
  CHECK_THROWS_AS(Parameters{c}, ConfigError);
  c = small_config();
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("zero parameters give equal label logits") {
  for (bool linear : {false, true}) {
    Parameters p(small_config(2, 2, 8, linear));
    const auto z = logits(p, std::vector<int>{1, 4, 2});
    REQUIRE(z.size() == 3);
    CHECK(z[0] == z[1]);
    CHECK(z[1] == z[2]);
  }
}

TEST_CASE("linear mode matches hand-computed readout") {
  const auto p = hand_linear_model();
  // final residual = x1 + (x0 + x1) / 2 = (0.5, 1.5)
  const auto z = logits(p, std::vector<int>{0, 1});
  CHECK(z[0] == doctest::Approx(0.5 * 1 + 1.5 * 2));
  CHECK(z[1] == doctest::Approx(0.5 * 3 - 1.5));
  // single token 0: residual (1,0) + (1,0)
  const auto z0 = logits(p, std::vector<int>{0});
  CHECK(z0[0] == doctest::Approx(2.0));
  CHECK(z0[1] == doctest::Approx(6.0));
}

TEST_CASE("forward is deterministic") {
  const auto p = Parameters::initialize(small_config(), 7);
  const std::vector<int> tokens{1, 2, 3, 4, 5};
  const auto a = forward(p, tokens);
  const auto b = forward(p, tokens);
  CHECK(a.logits == b.logits);
  CHECK(a.layers[1].head_out == b.layers[1].head_out);
}

TEST_CASE("forward rejects malformed input") {
  const auto p = Parameters::initialize(small_config(), 1);
  CHECK_THROWS_AS(forward(p, std::vector<int>{}), InputError);
  CHECK_THROWS_AS(forward(p, std::vector<int>{1, 12}), InputError);
  CHECK_THROWS_AS(forward(p, std::vector<int>{-1}), InputError);
  CHECK_THROWS_AS(forward(p, std::vector<int>(11, 1)), InputError);
}

TEST_CASE("forward agrees with the double-precision reference") {
  std::mt19937_64 rng(3);
  for (bool linear : {false, true}) {
    const auto p = Parameters::initialize(small_config(2, 2, 8, linear), 11);
    const auto flat = testing::to_double(p.values());
    for (int trial = 0; trial < 5; ++trial) {
      const auto tokens = testing::random_tokens(rng, p.config(), 6);
      const auto fast = logits(p, tokens);
      const auto ref = testing::reference_logits(p.config(), p.layout(), flat, tokens);
      for (std::size_t c = 0; c < fast.size(); ++c) {
        CHECK(fast[c] == doctest::Approx(ref[c]).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("linear mode is affine in the input embedding") {
  auto p = Parameters::initialize(small_config(2, 2, 8, true), 5);
  auto emb = p.tensor("tok_emb");
  const std::size_t d = 8;
  // tokens 0 (a), 1 (b), 2 (zero), 3 (a + b)
  for (std::size_t i = 0; i < d; ++i) {
    emb[2 * d + i] = 0.0F;
    emb[3 * d + i] = emb[0 * d + i] + emb[1 * d + i];
  }
  const auto fa = logits(p, std::vector<int>{0});
  const auto fb = logits(p, std::vector<int>{1});
  const auto f0 = logits(p, std::vector<int>{2});
  const auto fab = logits(p, std::vector<int>{3});
  for (std::size_t c = 0; c < fa.size(); ++c) {
    CHECK(fa[c] + fb[c] - f0[c] == doctest::Approx(fab[c]).epsilon(1e-4));
  }
}

TEST_CASE("backward matches central finite differences") {
  std::mt19937_64 rng(17);
  const auto p = Parameters::initialize(small_config(2, 2, 8, false), 23);
  const std::vector<int> t1 = testing::random_tokens(rng, p.config(), 5);
  const std::vector<int> t2 = testing::random_tokens(rng, p.config(), 7);
  const std::vector<LabeledTokens> batch{{t1, 0}, {t2, 2}};
  const auto grad = backward(p, batch);

  auto flat = testing::to_double(p.values());
  auto loss = [&]() {
    return 0.5 * (testing::reference_loss(p.config(), p.layout(), flat, t1, 0) +
                  testing::reference_loss(p.config(), p.layout(), flat, t2, 2));
  };
  std::uniform_int_distribution<std::size_t> coord(0, flat.size() - 1);
  const double h = Tolerances::finite_difference_step;
  int passed = 0;
  const int samples = 20;
  for (int i = 0; i < samples; ++i) {
    const auto c = coord(rng);
    const double saved = flat[c];
    flat[c] = saved + h;
    const double up = loss();
    flat[c] = saved - h;
    const double down = loss();
    flat[c] = saved;
    const double fd = (up - down) / (2 * h);
    const double bp = grad.values[c];
    const double rel = std::abs(bp - fd) /
                       std::max({std::abs(bp), std::abs(fd), Tolerances::gradient_rel_floor});
    passed += rel <= Tolerances::gradient_rel ? 1 : 0;
  }
  CHECK(passed >= 19);
  CHECK(grad.loss == doctest::Approx(loss()).epsilon(1e-5));
}

TEST_CASE("gradient vanishes at a saturated minimum") {
  auto p = hand_linear_model();
  auto wu = p.tensor("unembed");
  // label rows (100, 200) and (-100, 0): logit gap of several hundred
  wu[2] = 100.0F;
  wu[3] = 200.0F;
  wu[4] = -100.0F;
  wu[5] = 0.0F;
  const std::vector<int> tokens{0, 1};
  const std::vector<LabeledTokens> batch{{tokens, 0}};
  const auto grad = backward(p, batch);
  for (float g : grad.values) {
    CHECK(std::abs(g) <= 1e-6);
  }
}

TEST_CASE("duplicated batch gives the same mean gradient") {
  std::mt19937_64 rng(2);
  const auto p = Parameters::initialize(small_config(), 4);
  const auto a = testing::random_tokens(rng, p.config(), 4);
  const auto b = testing::random_tokens(rng, p.config(), 6);
  const std::vector<LabeledTokens> once{{a, 1}, {b, 0}};
  const std::vector<LabeledTokens> twice{{a, 1}, {b, 0}, {a, 1}, {b, 0}};
  const auto g1 = backward(p, once);
  const auto g2 = backward(p, twice);
  CHECK(g1.loss == doctest::Approx(g2.loss));
  for (std::size_t i = 0; i < g1.values.size(); ++i) {
    CHECK(g1.values[i] == doctest::Approx(g2.values[i]).epsilon(1e-5).scale(1e-6));
  }
}

TEST_CASE("backward reports the offending batch index") {
  auto p = Parameters::initialize(small_config(), 4);
  const std::vector<int> tokens{1, 2};
  const std::vector<LabeledTokens> bad_label{{tokens, 5}};
  CHECK_THROWS_AS(backward(p, bad_label), InputError);
  p.tensor("unembed")[9 * 8] = std::numeric_limits<float>::infinity();
  const std::vector<LabeledTokens> batch{{tokens, 0}, {tokens, 1}};
  CHECK_THROWS_WITH_AS(backward(p, batch), doctest::Contains("batch index"), NumericError);
}

TEST_CASE("head slices for n_heads=2, d_model=4") {
  ModelConfig c = small_config(1, 2, 4);
  const Parameters p(c);
  const auto& o = p.layout().layers[0];
  const auto s0 = head_param_slices(p, {0, 0});
  const auto s1 = head_param_slices(p, {0, 1});
  // Q, K, V: rows 0..2 (head 0) and 2..4 (head 1), four columns each
  CHECK(s0[0] == CoordRange{o.wq, o.wq + 8});
  CHECK(s1[0] == CoordRange{o.wq + 8, o.wq + 16});
  CHECK(s0[2] == CoordRange{o.wv, o.wv + 8});
  // O: columns 0..2 / 2..4 of every row
  CHECK(s0[3] == CoordRange{o.wo, o.wo + 2});
  CHECK(s1[3] == CoordRange{o.wo + 2, o.wo + 4});
  CHECK(s1[6] == CoordRange{o.wo + 14, o.wo + 16});
  CHECK_THROWS_AS(head_param_slices(p, {0, 2}), InputError);
  CHECK_THROWS_AS(head_param_slices(p, {1, 0}), InputError);
}

TEST_CASE("head slices partition the attention projections") {
  const Parameters p(small_config(2, 4, 8));
  for (int layer = 0; layer < 2; ++layer) {
    std::multiset<std::size_t> owned;
    for (int h = 0; h < 4; ++h) {
      for (const auto& r : head_param_slices(p, {layer, h})) {
        for (std::size_t i = r.begin; i < r.end; ++i) {
          owned.insert(i);
        }
      }
    }
    std::set<std::size_t> attention;
    for (const auto& t : p.layout().tensors()) {
      if (t.group == ParamGroup::attention && t.layer == layer) {
        for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
          attention.insert(i);
        }
      }
    }
    CHECK(owned.size() == attention.size());  // no coordinate claimed twice
    CHECK(std::set<std::size_t>(owned.begin(), owned.end()) == attention);
  }
}

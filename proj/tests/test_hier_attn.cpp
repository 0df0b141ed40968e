#include <random>

#include "doctest.h"
#include "mrg/hier_attn.hpp"
#include "support/checks.hpp"

using namespace mrg;
using checks::TensorD;
using oracle::Mat;

namespace {

Mat masked_mean_rows(const Mat& x, const Mask& mask) {
  Mat out(1, x.c);
  double n = 0.0;
  for (std::size_t i = 0; i < x.r; ++i) {
    if (!mask[i]) continue;
    n += 1.0;
    for (std::size_t k = 0; k < x.c; ++k) out(0, k) += x(i, k);
  }
  for (auto& v : out.v) v /= n;
  return out;
}

struct Fixture {
  ParamStore<double> params;
  HierarchicalAttention<double> hier;
  explicit Fixture(std::uint64_t seed, std::size_t dim = 8) : hier(params, "hier", dim, 2, 1) {
    checks::randomize(params, seed, 0.5);
  }
};

}  // namespace

TEST_SUITE("hier-attn") {
  TEST_CASE("single unmasked word: own value projection through the residual block") {
    Fixture f(1);
    std::mt19937_64 rng(1);
    const auto x = mul(checks::random_matrix(rng, 4, 8), row_mask<double>(Mask{1, 0, 0, 0}, 8));
    const auto out = f.hier.word_mam(x, Mask{1, 0, 0, 0});
    const auto& layer = f.hier.word_layers()[0];
    const auto row = slice(x, 0, 0, 1);
    const auto expected = layer_norm(add(row, matmul(matmul(row, layer.w_value()), layer.w_out())), layer.ln_gain(),
                                     layer.ln_bias(), layer.ln_eps());
    for (std::size_t c = 0; c < 8; ++c) CHECK(out.at(0, c) == doctest::Approx(expected.at(c)).epsilon(1e-12));
    for (std::size_t r = 1; r < 4; ++r)
      for (std::size_t c = 0; c < 8; ++c) CHECK(out.at(r, c) == 0.0);
  }

  TEST_CASE("identical words give identical rows") {
    Fixture f(2);
    std::mt19937_64 rng(2);
    const auto row = checks::random_matrix(rng, 1, 8);
    const auto out = f.hier.word_mam(concat({row, row, row}, 0), Mask{1, 1, 1});
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(out.at(0, c) == out.at(1, c));
      CHECK(out.at(0, c) == out.at(2, c));
    }
  }

  TEST_CASE("word level matches the straight-line self-attention oracle") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      Fixture f(seed);
      std::mt19937_64 rng(seed);
      const Mask mask{1, 1, 1, 0};
      const auto x = mul(checks::random_matrix(rng, 4, 8), row_mask<double>(mask, 8));
      auto expected = oracle::cam(checks::to_mat(x), checks::to_mat(x), mask,
                                  checks::cam_params(f.hier.word_layers()[0]))
                          .output;
      for (std::size_t c = 0; c < 8; ++c) expected(3, c) = 0.0;
      CHECK(oracle::max_abs_diff(checks::to_mat(f.hier.word_mam(x, mask)), expected) <= 1e-6);
    }
  }

  TEST_CASE("utterance level matches the straight-line oracle for three utterances") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      Fixture f(seed);
      std::mt19937_64 rng(seed + 100);
      std::vector<TensorD> words;
      std::vector<Mask> masks;
      for (std::size_t j = 0; j < 3; ++j) {
        masks.push_back(checks::prefix_mask(6, 1 + rng() % 6));
        words.push_back(mul(checks::random_matrix(rng, 6, 8), row_mask<double>(masks.back(), 8)));
      }
      const auto r = f.hier.utterance_level(words, masks, 5);
      Mat pooled(5, 8);
      for (std::size_t j = 0; j < 3; ++j) {
        const auto m = masked_mean_rows(checks::to_mat(words[j]), masks[j]);
        for (std::size_t c = 0; c < 8; ++c) pooled(j, c) = m(0, c);
      }
      const Mask utt_mask{1, 1, 1, 0, 0};
      auto utts = oracle::cam(pooled, pooled, utt_mask, checks::cam_params(f.hier.utterance_attention())).output;
      for (std::size_t j = 3; j < 5; ++j)
        for (std::size_t c = 0; c < 8; ++c) utts(j, c) = 0.0;
      CHECK(oracle::max_abs_diff(checks::to_mat(r.pooled), pooled) <= 1e-12);
      CHECK(oracle::max_abs_diff(checks::to_mat(r.utterances), utts) <= 1e-6);
      CHECK(oracle::max_abs_diff(checks::to_mat(r.dialog), masked_mean_rows(utts, utt_mask)) <= 1e-6);
      CHECK(r.utterance_mask == utt_mask);
    }
  }

  TEST_CASE("one utterance: the dialog vector is that utterance's vector") {
    Fixture f(3);
    std::mt19937_64 rng(3);
    const auto r = f.hier.forward({checks::random_matrix(rng, 4, 8)}, {Mask{1, 1, 1, 1}}, 5);
    for (std::size_t c = 0; c < 8; ++c) CHECK(r.dialog.at(c) == r.utterances.at(0, c));
  }

  TEST_CASE("identical utterances give identical vectors") {
    Fixture f(4);
    std::mt19937_64 rng(4);
    const auto u = checks::random_matrix(rng, 4, 8);
    const Mask m{1, 1, 1, 0};
    const auto r = f.hier.forward({u, u, u}, {m, m, m}, 5);
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(r.utterances.at(1, c) == r.utterances.at(0, c));
      CHECK(r.utterances.at(2, c) == r.utterances.at(0, c));
      CHECK(r.dialog.at(c) == doctest::Approx(r.utterances.at(0, c)).epsilon(1e-14));
    }
  }

  TEST_CASE("permuting utterances permutes their vectors and keeps the dialog vector") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      Fixture f(seed);
      std::mt19937_64 rng(seed);
      std::vector<TensorD> utts;
      std::vector<Mask> masks;
      for (std::size_t j = 0; j < 4; ++j) {
        masks.push_back(checks::prefix_mask(5, 1 + rng() % 5));
        utts.push_back(mul(checks::random_matrix(rng, 5, 8), row_mask<double>(masks.back(), 8)));
      }
      const std::vector<std::size_t> perm{3, 1, 0, 2};
      std::vector<TensorD> pu;
      std::vector<Mask> pm;
      for (auto j : perm) {
        pu.push_back(utts[j]);
        pm.push_back(masks[j]);
      }
      const auto r = f.hier.forward(utts, masks, 5);
      const auto p = f.hier.forward(pu, pm, 5);
      double worst = 0.0;
      for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t c = 0; c < 8; ++c)
          worst = std::max(worst, std::abs(p.utterances.at(k, c) - r.utterances.at(perm[k], c)));
      for (std::size_t c = 0; c < 8; ++c) worst = std::max(worst, std::abs(p.dialog.at(c) - r.dialog.at(c)));
      CHECK(worst <= 1e-12);
    }
  }

  TEST_CASE("attention rows sum to one at both levels; padded utterances stay zero") {
    Fixture f(6);
    std::mt19937_64 rng(6);
    ForwardTrace<double> trace;
    const auto r = f.hier.forward({checks::random_matrix(rng, 4, 8), checks::random_matrix(rng, 4, 8)},
                                  {Mask{1, 1, 0, 0}, Mask{1, 1, 1, 1}}, 5, &trace);
    CHECK(trace.word_attention.size() == 4);
    CHECK(trace.utterance_attention.size() == 1);
    for (const auto* list : {&trace.word_attention, &trace.utterance_attention})
      for (const auto& w : *list)
        for (std::size_t i = 0; i < w.rows(); ++i) {
          double s = 0.0;
          for (std::size_t k = 0; k < w.cols(); ++k) s += w.at(i, k);
          CHECK(std::abs(s - 1.0) <= 1e-6);
        }
    for (std::size_t j = 2; j < 5; ++j) {
      CHECK(trace.utterance_attention[0].at(0, j) == 0.0);
      for (std::size_t c = 0; c < 8; ++c) CHECK(r.utterances.at(j, c) == 0.0);
    }
  }

  TEST_CASE("pooling without attention is a masked mean at both levels") {
    const auto a = TensorD::from({2, 2}, {1, 2, 3, 4});
    const auto b = TensorD::from({2, 2}, {10, 20, 99, 99});
    const auto r = pool_without_attention<double>({a, b}, {Mask{1, 1}, Mask{1, 0}}, 3);
    CHECK(checks::values(r.utterances) == std::vector<double>{2, 3, 10, 20, 0, 0});
    CHECK(checks::values(r.dialog) == std::vector<double>{6, 11.5});
  }

  TEST_CASE("more utterances than slots is rejected") {
    Fixture f(7);
    const auto u = TensorD::zeros({2, 8});
    CHECK_THROWS(f.hier.forward({u, u, u}, {Mask{1, 1}, Mask{1, 1}, Mask{1, 1}}, 2));
  }

  TEST_CASE("gradients match central differences") {
    Fixture f(8);
    std::mt19937_64 rng(8);
    const auto u1 = checks::random_matrix(rng, 3, 8), u2 = checks::random_matrix(rng, 3, 8);
    std::vector<TensorD> leaves;
    for (auto& e : f.params.entries()) leaves.push_back(e.tensor);
    CHECK(checks::fd_error([&] { return f.hier.forward({u1, u2}, {Mask{1, 1, 1}, Mask{1, 1, 0}}, 4).dialog; }, leaves,
                           8) <= 1e-4);
  }
}

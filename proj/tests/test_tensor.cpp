#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include <doctest.h>

#include "tide/rng.hpp"
#include "tide/tensor.hpp"

using namespace tide;

namespace {

Tensor random_tensor(SplitMix64& rng, std::vector<std::size_t> shape, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(rng.normal(0.0, sd));
  return t;
}

}  // namespace

TEST_CASE("tensor construction checks the element count") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.shape_string() == "[2x3]");
}

TEST_CASE("matmul small cases") {
  const Tensor eye = Tensor::from_rows({{1, 0}, {0, 1}});
  const Tensor b = Tensor::from_rows({{5, 6}, {7, 8}});
  CHECK(matmul(eye, b) == b);

  const Tensor row = Tensor::from_rows({{1, 2}});
  const Tensor col = Tensor::from_rows({{3}, {4}});
  const Tensor p = matmul(row, col);
  CHECK(p.shape() == std::vector<std::size_t>{1, 1});
  CHECK(p.at(0, 0) == 11.0f);

  CHECK_THROWS_AS(matmul(row, row), ShapeError);
}

TEST_CASE("matmul matches a triple-loop oracle") {
  SplitMix64 rng(11);
  {
    Tensor a({7, 5}), b({5, 3});
    for (float& v : a.data()) v = static_cast<float>(rng.uniform(-1, 1));
    for (float& v : b.data()) v = static_cast<float>(rng.uniform(-1, 1));
    const Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < 7; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        double ref = 0.0;
        for (std::size_t p = 0; p < 5; ++p) ref += double(a.at(i, p)) * double(b.at(p, j));
        CHECK(std::abs(c.at(i, j) - ref) <= 1e-6);
      }
    }
  }
  // Shapes straddle the 64-column register tile.
  for (auto [m, k, n] : std::vector<std::array<std::size_t, 3>>{{9, 33, 64}, {4, 17, 150}}) {
    const Tensor a = random_tensor(rng, {m, k});
    const Tensor b = random_tensor(rng, {k, n});
    const Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double ref = 0.0;
        for (std::size_t p = 0; p < k; ++p) ref += double(a.at(i, p)) * double(b.at(p, j));
        CHECK(std::abs(c.at(i, j) - ref) <= 1e-6 * std::max(1.0, std::abs(ref)) * k);
      }
    }
  }
}

TEST_CASE("matmul with the identity is exact") {
  SplitMix64 rng(12);
  const Tensor a = random_tensor(rng, {6, 6});
  Tensor eye({6, 6});
  for (std::size_t i = 0; i < 6; ++i) eye.at(i, i) = 1.0f;
  CHECK(matmul(eye, a) == a);
  CHECK(matmul(a, eye) == a);
}

TEST_CASE("matmul rows do not depend on the batch they are in") {
  SplitMix64 rng(13);
  const Tensor a = random_tensor(rng, {10, 40});
  const Tensor b = random_tensor(rng, {40, 70});
  const Tensor full = matmul(a, b);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const Tensor one({1, 40}, std::vector<float>(a.row(i).begin(), a.row(i).end()));
    const Tensor r = matmul(one, b);
    CHECK(std::equal(r.data().begin(), r.data().end(), full.row(i).begin()));
  }
}

TEST_CASE("linear is x times the transposed weight") {
  SplitMix64 rng(14);
  const Tensor x = random_tensor(rng, {3, 8});
  const Tensor w = random_tensor(rng, {5, 8});
  const Tensor y = linear(x, w);
  REQUIRE(y.shape() == std::vector<std::size_t>{3, 5});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double ref = 0;
      for (std::size_t p = 0; p < 8; ++p) ref += double(x.at(i, p)) * w.at(j, p);
      CHECK(y.at(i, j) == doctest::Approx(ref).epsilon(1e-5));
    }
  }
  CHECK_THROWS_AS(linear(x, random_tensor(rng, {5, 7})), ShapeError);
}

TEST_CASE("rmsnorm examples") {
  const Tensor ones = Tensor::from_rows({{1, 1, 1, 1}});
  CHECK(rmsnorm(ones, 0.0f) == ones);

  const Tensor zero({1, 8});
  CHECK(rmsnorm(zero, 1e-6f) == zero);
  CHECK(rmsnorm(zero, 0.0f) == zero);

  SplitMix64 rng(21);
  const Tensor h = random_tensor(rng, {5, 64});
  std::vector<float> gain(64);
  for (float& g : gain) g = static_cast<float>(rng.uniform(0.5, 1.5));
  const Tensor plain = rmsnorm(h, 1e-6f);
  const Tensor gained = rmsnorm(h, gain, 1e-6f);
  for (std::size_t r = 0; r < h.rows(); ++r) {
    double ms = 0;
    for (float v : h.row(r)) ms += double(v) * v;
    ms /= 64.0;
    const double inv = 1.0 / std::sqrt(ms + 1e-6);
    for (std::size_t c = 0; c < 64; ++c) {
      CHECK(std::abs(plain.at(r, c) - h.at(r, c) * inv) <= 1e-6);
      CHECK(std::abs(gained.at(r, c) - h.at(r, c) * inv * gain[c]) <= 1e-6);
    }
  }
}

TEST_CASE("rmsnorm output has unit root-mean-square") {
  SplitMix64 rng(22);
  // Holds while eps is negligible against the mean square.
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor h = random_tensor(rng, {1, 32}, rng.uniform(1.0, 10.0));
    const Tensor y = rmsnorm(h, 1e-6f);
    double ms = 0;
    for (float v : y.data()) ms += double(v) * v;
    CHECK(std::abs(std::sqrt(ms / 32.0) - 1.0) <= 1e-5);
  }
}

TEST_CASE("silu values") {
  CHECK(silu(0.0f) == 0.0f);
  CHECK(silu(1.0f) == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(silu(40.0f) == doctest::Approx(40.0));
  CHECK(std::abs(silu(-40.0f)) < 1e-12);
  const Tensor t = silu(Tensor::from_rows({{0, 1}}));
  CHECK(t.at(0, 1) == silu(1.0f));
}

TEST_CASE("sigmoid is stable and symmetric") {
  CHECK(sigmoid(0.0f) == 0.5f);
  const float tiny = sigmoid(-100.0f);
  CHECK(tiny > 0.0f);
  CHECK(tiny <= 1e-40f);
  CHECK(sigmoid(100.0f) == 1.0f);
  for (float x = -30.0f; x <= 30.0f; x += 0.37f) {
    CHECK(std::abs(double(sigmoid(x)) + double(sigmoid(-x)) - 1.0) <= 1e-7);
  }
  CHECK_FALSE(std::isnan(sigmoid(-1000.0f)));
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  const Tensor s = softmax(Tensor::from_rows({{1000, 1000, 999}, {0, 0, 0}}));
  for (std::size_t r = 0; r < 2; ++r) {
    double sum = 0;
    for (float v : s.row(r)) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK(s.at(1, 0) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("cosine similarity cases") {
  const std::vector<float> a{1, 2, 3}, neg{-1, -2, -3};
  const std::vector<float> e1{1, 0}, e2{0, 1}, z{0, 0, 0};
  CHECK(*cosine_similarity(a, a) == doctest::Approx(1.0));
  CHECK(*cosine_similarity(e1, e2) == 0.0f);
  CHECK(*cosine_similarity(a, neg) == doctest::Approx(-1.0));
  CHECK_FALSE(cosine_similarity(a, z).has_value());
  CHECK_FALSE(cosine_similarity(z, z).has_value());
  CHECK_THROWS_AS(cosine_similarity(a, e1), ShapeError);
}

TEST_CASE("cosine similarity is clamped and scale invariant") {
  SplitMix64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> a(16), b(16);
    for (auto& v : a) v = static_cast<float>(rng.normal(0, 1));
    for (auto& v : b) v = static_cast<float>(rng.normal(0, 1));
    const float base = *cosine_similarity(a, b);
    CHECK(base >= -1.0f);
    CHECK(base <= 1.0f);
    CHECK(*cosine_similarity(a, a) <= 1.0f);
    const float alpha = static_cast<float>(rng.uniform(0.01, 100.0));
    const float beta = static_cast<float>(rng.uniform(0.01, 100.0));
    std::vector<float> sa(a), sb(b);
    for (auto& v : sa) v *= alpha;
    for (auto& v : sb) v *= beta;
    CHECK(std::abs(*cosine_similarity(sa, sb) - base) <= 1e-6);
  }
}

TEST_CASE("non-finite results are errors") {
  const float big = std::numeric_limits<float>::max();
  const Tensor a = Tensor::from_rows({{big, big}});
  const Tensor b = Tensor::from_rows({{big}, {big}});
  CHECK_THROWS_AS(matmul(a, b), NumericError);
  std::vector<float> bad{1.0f, std::numeric_limits<float>::quiet_NaN()};
  CHECK_THROWS_AS(require_finite(bad, "test"), NumericError);
}

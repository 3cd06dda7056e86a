#include <catch2/catch.hpp>

#include <convfse/rng.hpp>
#include <convfse/tensor.hpp>

using namespace convfse;

TEST_CASE("tensor shape and indexing", "[tensor]") {
  Tensor<float> t({2, 3, 4});
  REQUIRE(t.numel() == 24);
  REQUIRE(t.ndim() == 3);
  t.at(1, 2, 3) = 5.0f;
  REQUIRE(t[23] == 5.0f);
  t.at(0, 0, 0) = -1.0f;
  REQUIRE(t[0] == -1.0f);

  Tensor<float> q({2, 2, 2, 2});
  q.at(1, 1, 1, 1) = 9.0f;
  REQUIRE(q[15] == 9.0f);
}

TEST_CASE("tensor rejects bad shapes", "[tensor]") {
  REQUIRE_THROWS_AS(Tensor<float>(std::vector<int>{}), ShapeError);
  REQUIRE_THROWS_AS(Tensor<float>({1, 2, 3, 4, 5}), ShapeError);
  REQUIRE_THROWS_AS(Tensor<float>({3, 0}), ShapeError);
  REQUIRE_THROWS_AS(Tensor<float>({-1}), ShapeError);
}

TEST_CASE("tensor cast and finiteness", "[tensor]") {
  Tensor<float> t({2, 2}, 1.5f);
  Tensor<double> d = t.cast<double>();
  REQUIRE(d.at(1, 1) == 1.5);
  REQUIRE(t.all_finite());
  t[0] = std::numeric_limits<float>::quiet_NaN();
  REQUIRE_FALSE(t.all_finite());
}

TEST_CASE("rng is deterministic and in range", "[tensor]") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    const double u = a.uniform();
    REQUIRE(u == b.uniform());
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  Rng c(42);
  for (int i = 0; i < 100; ++i) {
    const auto v = c.uniform_int(3, 7);
    REQUIRE(v >= 3);
    REQUIRE(v <= 7);
  }
  // normal: sane first two moments over a modest sample
  Rng d(7);
  double mean = 0.0, m2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = d.normal();
    mean += x;
    m2 += x * x;
  }
  mean /= n;
  m2 /= n;
  REQUIRE(std::abs(mean) < 0.03);
  REQUIRE(std::abs(m2 - 1.0) < 0.05);
}

TEST_CASE("max_abs_diff demands matching shapes", "[tensor]") {
  Tensor<float> a({2, 2}), b({4});
  REQUIRE_THROWS_AS(max_abs_diff(a, b), ShapeError);
}

#include "valstitch/rng.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"

using valstitch::Rng;

TEST_CASE("named streams are deterministic and distinct") {
  Rng a = Rng::stream(42, "gen.sample", 0);
  Rng b = Rng::stream(42, "gen.sample", 0);
  Rng c = Rng::stream(42, "gen.sample", 1);
  Rng d = Rng::stream(42, "gmm.sample", 0);

  std::vector<std::uint64_t> xs, ys;
  for (int i = 0; i < 16; ++i) {
    xs.push_back(a.next_u64());
    ys.push_back(b.next_u64());
  }
  CHECK(xs == ys);
  CHECK(c.next_u64() != xs[0]);
  CHECK(d.next_u64() != xs[0]);
}

TEST_CASE("normal draws have the right first two moments") {
  Rng rng(7);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("uniform stays in [0,1)") {
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("categorical respects weights") {
  Rng rng(11);
  Eigen::VectorXd w(3);
  w << 1.0, 2.0, 1.0;
  std::vector<int> counts(3, 0);
  const int n = 40000;
  for (int i = 0; i < n; ++i) counts[rng.categorical(w)]++;
  CHECK(counts[0] + counts[1] + counts[2] == n);
  CHECK(std::abs(counts[1] / double(n) - 0.5) < 0.02);

  Eigen::VectorXd zero = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(rng.categorical(zero), std::invalid_argument);
}

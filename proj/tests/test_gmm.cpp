#include "valstitch/gmm.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"

using namespace valstitch;
namespace G = valstitch::gmm;

namespace {

G::GmmSpec standard_normal(int d) {
  Eigen::VectorXd w(1);
  w << 1.0;
  return G::isotropic_gmm(w, {Eigen::VectorXd::Zero(d)}, 1.0);
}

// Equal-weight 1D mixture 0.5 N(-2, 0.25) + 0.5 N(2, 0.25).
G::GmmSpec bimodal1d() {
  Eigen::VectorXd w(2);
  w << 0.5, 0.5;
  Eigen::VectorXd m1(1), m2(1);
  m1 << -2.0;
  m2 << 2.0;
  return G::isotropic_gmm(w, {m1, m2}, 0.25);
}

Eigen::VectorXd vec1(double x) {
  Eigen::VectorXd v(1);
  v << x;
  return v;
}

double fd_log_density(const G::GmmSpec& g, double t, const Eigen::VectorXd& z,
                      int i, double h) {
  G::GmmSpec mt = G::marginal(g, t);
  Eigen::VectorXd zp = z, zm = z;
  zp[i] += h;
  zm[i] -= h;
  return (G::log_density(mt, zp) - G::log_density(mt, zm)) / (2 * h);
}

}  // namespace

TEST_CASE("gmm validation") {
  Eigen::VectorXd w(2);
  w << 0.6, 0.5;  // sums to 1.1
  CHECK_THROWS_AS(G::isotropic_gmm(w, {vec1(0), vec1(1)}, 1.0),
                  std::invalid_argument);

  Eigen::VectorXd w2(2);
  w2 << 0.5, 0.5;
  CHECK_THROWS_AS(G::isotropic_gmm(w2, {vec1(0), vec1(1)}, -1.0),
                  std::invalid_argument);

  // dimension cap
  Eigen::VectorXd w1(1);
  w1 << 1.0;
  CHECK_THROWS_AS(G::isotropic_gmm(w1, {Eigen::VectorXd::Zero(9)}, 1.0),
                  std::invalid_argument);
}

TEST_CASE("marginal parameters") {
  auto g = standard_normal(2);
  auto m = G::marginal(g, 0.5);
  CHECK(m.means[0].isZero());
  CHECK(m.covs[0].isApprox(0.5 * Eigen::MatrixXd::Identity(2, 2), 1e-14));

  auto m0 = G::marginal(g, 0.0);
  CHECK(m0.covs[0].isApprox(g.covs[0], 1e-14));

  auto b = bimodal1d();
  auto m1 = G::marginal(b, 1.0);
  CHECK(m1.means[0].isZero());
  CHECK(m1.means[1].isZero());
  CHECK(m1.covs[0].isApprox(Eigen::MatrixXd::Identity(1, 1), 1e-14));
}

TEST_CASE("score of standard normal marginal") {
  auto g = standard_normal(1);
  // marginal variance at t=0.5 is 0.25 + 0.25 = 0.5, so score(1) = -1/0.5.
  CHECK(G::score(g, 0.5, vec1(1.0))[0] == doctest::Approx(-2.0).epsilon(1e-12));
}

TEST_CASE("score matches finite differences of log density") {
  auto b = bimodal1d();
  for (double t : {0.0, 0.3, 0.9}) {
    for (double z : {0.0, 0.5, -1.7, 2.2}) {
      const double fd = fd_log_density(b, t, vec1(z), 0, 1e-5);
      CHECK(G::score(b, t, vec1(z))[0] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("score vanishes at the symmetry point") {
  auto b = bimodal1d();
  CHECK(std::abs(G::score(b, 0.4, vec1(0.0))[0]) < 1e-14);
}

TEST_CASE("score_batch agrees with per-point score") {
  auto b = bimodal1d();
  Rng rng = Rng::stream(5, "test.score_batch");
  Eigen::MatrixXd zs = rng.normal_mat(1, 17);
  Eigen::MatrixXd s = G::score_batch(b, 0.7, zs);
  for (int i = 0; i < zs.cols(); ++i)
    CHECK(s(0, i) == doctest::Approx(G::score(b, 0.7, zs.col(i))[0]).epsilon(1e-12));
}

TEST_CASE("posterior mean basics") {
  auto g = standard_normal(1);
  CHECK(G::posterior_mean(g, 0.5, vec1(0.7))[0] == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(G::posterior_mean(g, 0.0, vec1(-1.3))[0] == doctest::Approx(-1.3));

  auto b = bimodal1d();
  CHECK(std::abs(G::posterior_mean(b, 0.9, vec1(0.0))[0]) < 1e-13);

  CHECK_THROWS_AS(G::posterior_mean(g, 1.0, vec1(0.0)), std::domain_error);
}

TEST_CASE("Tweedie identity at random points") {
  auto b = bimodal1d();
  Rng rng = Rng::stream(9, "test.tweedie");
  for (int i = 0; i < 200; ++i) {
    const double t = 0.05 + 0.9 * rng.uniform();
    Eigen::VectorXd z = 3.0 * rng.normal_vec(1);
    Eigen::VectorXd lhs = G::posterior_mean(b, t, z);
    Eigen::VectorXd rhs = (z + t * t * G::score(b, t, z)) / (1.0 - t);
    CHECK(std::abs(lhs[0] - rhs[0]) <= 1e-10 * std::max(1.0, std::abs(rhs[0])));
  }
}

TEST_CASE("score-velocity identity: denoiser from velocity") {
  // u = -z/(1-t) - (t/(1-t)) score  and  D = z - t u must agree with the
  // posterior mean.
  auto b = bimodal1d();
  Rng rng = Rng::stream(10, "test.velocity_identity");
  for (int i = 0; i < 200; ++i) {
    const double t = 0.05 + 0.9 * rng.uniform();
    Eigen::VectorXd z = 3.0 * rng.normal_vec(1);
    Eigen::VectorXd u =
        -z / (1.0 - t) - (t / (1.0 - t)) * G::score(b, t, z);
    Eigen::VectorXd d = z - t * u;
    Eigen::VectorXd dm = G::posterior_mean(b, t, z);
    CHECK(std::abs(d[0] - dm[0]) <= 1e-10 * std::max(1.0, std::abs(dm[0])));
  }
}

TEST_CASE("value basics") {
  auto g = standard_normal(1);
  G::LinearReward r{vec1(1.0), 0.0};
  CHECK(G::value(g, r, 0.5, vec1(0.7)) == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(G::value(g, r, 0.0, vec1(0.4)) == doctest::Approx(0.4));

  // For linear rewards the value equals the reward of the posterior mean.
  auto b = bimodal1d();
  for (double z : {0.0, 0.1, 1.0}) {
    CHECK(G::value(b, r, 0.9, vec1(z)) ==
          doctest::Approx(r(G::posterior_mean(b, 0.9, vec1(z)))).epsilon(1e-14));
  }
}

TEST_CASE("value agrees with MC posterior rollout oracle") {
  auto b = bimodal1d();
  G::LinearReward r{vec1(1.0), 0.0};
  Rng rng = Rng::stream(77, "test.mc_oracle");
  for (double z : {0.0, 0.1}) {
    auto est = G::mc_value_oracle(b, r, 0.9, vec1(z), 10000, rng);
    const double exact = G::value(b, r, 0.9, vec1(z));
    CHECK(std::abs(est.mean - exact) < 3.0 * est.stderr_of_mean + 1e-12);
  }
}

TEST_CASE("mc oracle determinism and edge cases") {
  auto b = bimodal1d();
  G::LinearReward r{vec1(1.0), 0.0};
  Rng r1 = Rng::stream(4, "x");
  Rng r2 = Rng::stream(4, "x");
  auto e1 = G::mc_value_oracle(b, r, 0.5, vec1(0.2), 64, r1);
  auto e2 = G::mc_value_oracle(b, r, 0.5, vec1(0.2), 64, r2);
  CHECK(e1.mean == e2.mean);

  Rng r3 = Rng::stream(4, "y");
  auto single = G::mc_value_oracle(b, r, 0.5, vec1(0.2), 1, r3);
  CHECK(single.n == 1);
  CHECK(single.stderr_of_mean == 0.0);

  CHECK_THROWS_AS(G::mc_value_oracle(b, r, 0.5, vec1(0.2), 0, r3),
                  std::invalid_argument);
}

TEST_CASE("soft value closed forms") {
  auto g = standard_normal(1);
  G::LinearReward r{vec1(1.0), 0.0};
  // posterior at t=0.5 is N(z, 0.5): log E exp(z0) = z + 0.25.
  for (double z : {-1.0, 0.0, 0.7}) {
    CHECK(G::soft_value(g, r, 0.5, vec1(z)) ==
          doctest::Approx(z + 0.25).epsilon(1e-12));
  }

  G::LinearReward constant{vec1(0.0), 3.0};
  CHECK(G::soft_value(g, constant, 0.5, vec1(0.2)) == doctest::Approx(3.0));
}

TEST_CASE("soft value MC check") {
  auto b = bimodal1d();
  G::LinearReward r{vec1(0.5), 0.1};
  Rng rng = Rng::stream(21, "test.softmc");
  const double t = 0.6;
  Eigen::VectorXd z = vec1(0.4);
  const int n = 200000;
  double sum_exp = 0.0;
  for (int i = 0; i < n; ++i) sum_exp += std::exp(r(G::sample_posterior(b, t, z, rng)));
  const double mc = std::log(sum_exp / n);
  CHECK(G::soft_value(b, r, t, z) == doctest::Approx(mc).epsilon(0.01));
}

TEST_CASE("Jensen: soft value dominates standard value") {
  auto b = bimodal1d();
  G::LinearReward r{vec1(1.0), 0.0};
  Rng rng = Rng::stream(31, "test.jensen");
  for (int i = 0; i < 2000; ++i) {
    const double t = 0.05 + 0.9 * rng.uniform();
    Eigen::VectorXd z = 3.0 * rng.normal_vec(1);
    const double v = G::value(b, r, t, z);
    const double sv = G::soft_value(b, r, t, z);
    CHECK(sv >= v - 1e-12);
    if (G::posterior_reward_variance(b, r, t, z) > 1e-6) CHECK(sv > v);
  }
}

TEST_CASE("tempered soft value Taylor expansion has cubic residual") {
  auto b = bimodal1d();
  G::LinearReward r{vec1(1.0), 0.0};
  const double t = 0.5;
  Eigen::VectorXd z = vec1(0.3);
  const double v = G::value(b, r, t, z);
  const double var = G::posterior_reward_variance(b, r, t, z);

  std::vector<double> lambdas = {0.02, 0.04, 0.08, 0.16};
  std::vector<double> logs_l, logs_r;
  for (double l : lambdas) {
    const double resid =
        std::abs(G::tempered_soft_value(b, r, l, t, z) - l * v - 0.5 * l * l * var);
    REQUIRE(resid > 0.0);
    logs_l.push_back(std::log(l));
    logs_r.push_back(std::log(resid));
  }
  // least-squares slope of log residual vs log lambda
  double mx = 0, my = 0;
  for (size_t i = 0; i < logs_l.size(); ++i) {
    mx += logs_l[i];
    my += logs_r[i];
  }
  mx /= logs_l.size();
  my /= logs_r.size();
  double num = 0, den = 0;
  for (size_t i = 0; i < logs_l.size(); ++i) {
    num += (logs_l[i] - mx) * (logs_r[i] - my);
    den += (logs_l[i] - mx) * (logs_l[i] - mx);
  }
  const double slope = num / den;
  CHECK(slope == doctest::Approx(3.0).epsilon(0.1));
}

TEST_CASE("tilted distribution closed form") {
  auto b = bimodal1d();
  G::LinearReward r{vec1(1.0), 0.0};
  auto tb = G::tilted(b, r);
  CHECK(tb.weights[0] == doctest::Approx(0.0180).epsilon(2e-3));
  CHECK(tb.weights[1] == doctest::Approx(0.9820).epsilon(2e-4));
  CHECK(tb.means[0][0] == doctest::Approx(-1.75));
  CHECK(tb.means[1][0] == doctest::Approx(2.25));
  CHECK(tb.weights.sum() == doctest::Approx(1.0).epsilon(1e-14));

  // zero reward leaves the mixture unchanged
  G::LinearReward zero{vec1(0.0), 0.0};
  auto same = G::tilted(b, zero);
  CHECK(same.weights.isApprox(b.weights, 1e-14));
  CHECK(same.means[0].isApprox(b.means[0], 1e-14));

  // textbook exponential tilt of N(0,1)
  auto g = standard_normal(1);
  auto tg = G::tilted(g, r);
  CHECK(tg.means[0][0] == doctest::Approx(1.0));
  CHECK(tg.covs[0](0, 0) == doctest::Approx(1.0));
}

TEST_CASE("tilted density matches quadrature of p exp(r)") {
  auto b = bimodal1d();
  G::LinearReward r{vec1(1.0), 0.0};
  auto tb = G::tilted(b, r);

  const int n = 40001;
  const double lo = -12.0, hi = 12.0;
  const double h = (hi - lo) / (n - 1);
  // Simpson quadrature of the unnormalized tilt.
  auto unnorm = [&](double x) {
    return std::exp(G::log_density(b, vec1(x)) + r(vec1(x)));
  };
  double zsum = unnorm(lo) + unnorm(hi);
  for (int i = 1; i < n - 1; ++i) zsum += (i % 2 ? 4.0 : 2.0) * unnorm(lo + i * h);
  const double zconst = zsum * h / 3.0;

  double max_rel = 0.0;
  for (double x = -6.0; x <= 6.0; x += 0.05) {
    const double want = unnorm(x) / zconst;
    const double got = std::exp(G::log_density(tb, vec1(x)));
    if (want > 1e-12)
      max_rel = std::max(max_rel, std::abs(got - want) / want);
  }
  CHECK(max_rel < 1e-6);
}

TEST_CASE("tilted score identity") {
  // score of the tilted marginal = base score + grad of the soft value,
  // with the gradient checked by finite differences of soft_value.
  auto b = bimodal1d();
  G::LinearReward r{vec1(0.8), 0.2};
  Rng rng = Rng::stream(55, "test.tilted_score");
  for (int i = 0; i < 50; ++i) {
    const double t = 0.05 + 0.9 * rng.uniform();
    Eigen::VectorXd z = 2.5 * rng.normal_vec(1);
    const double h = 1e-5;
    const double fd = (G::soft_value(b, r, t, vec1(z[0] + h)) -
                       G::soft_value(b, r, t, vec1(z[0] - h))) /
                      (2 * h);
    const double lhs = G::score(G::tilted(b, r), t, z)[0];
    const double rhs = G::score(b, t, z)[0] + fd;
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
    CHECK(G::soft_value_grad(b, r, t, z)[0] == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("value gradient matches finite differences") {
  auto b = bimodal1d();
  G::LinearReward r{vec1(1.0), 0.0};
  Rng rng = Rng::stream(56, "test.value_grad");
  for (int i = 0; i < 50; ++i) {
    const double t = 0.05 + 0.9 * rng.uniform();
    Eigen::VectorXd z = 2.5 * rng.normal_vec(1);
    const double h = 1e-5;
    const double fd =
        (G::value(b, r, t, vec1(z[0] + h)) - G::value(b, r, t, vec1(z[0] - h))) /
        (2 * h);
    CHECK(G::value_grad(b, r, t, z)[0] == doctest::Approx(fd).epsilon(1e-4));
  }

  // at t=0 the value is the reward itself
  CHECK(G::value_grad(b, r, 0.0, vec1(0.3))[0] == doctest::Approx(1.0));
}

TEST_CASE("2d sanity: sampling moments and posterior mean") {
  Eigen::VectorXd w(2);
  w << 0.3, 0.7;
  Eigen::VectorXd m1(2), m2(2);
  m1 << -1.0, 0.5;
  m2 << 2.0, -0.5;
  auto g = G::isotropic_gmm(w, {m1, m2}, 0.4);

  Rng rng = Rng::stream(61, "test.sample2d");
  Eigen::MatrixXd xs = G::sample(g, 20000, rng);
  Eigen::VectorXd mean = xs.rowwise().mean();
  Eigen::VectorXd want = 0.3 * m1 + 0.7 * m2;
  CHECK((mean - want).norm() < 0.05);

  // batch posterior mean equals scalar route
  Eigen::MatrixXd zs = xs.leftCols(13);
  Eigen::MatrixXd pm = G::posterior_mean_batch(g, 0.6, zs);
  for (int i = 0; i < zs.cols(); ++i)
    CHECK((pm.col(i) - G::posterior_mean(g, 0.6, zs.col(i))).norm() < 1e-10);
}

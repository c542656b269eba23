#include "valstitch/reward_model.hpp"

#include <cmath>

#include "doctest.h"

using namespace valstitch;

namespace {

Eigen::VectorXd vec1(double x) {
  Eigen::VectorXd v(1);
  v << x;
  return v;
}

}  // namespace

TEST_CASE("analytic reward evaluation") {
  gmm::LinearReward r{vec1(1.0), 0.0};
  rew::RewardModel m = rew::analytic_reward(r);
  CHECK(rew::reward(m, vec1(1.5)) == doctest::Approx(1.5));

  gmm::LinearReward c{vec1(0.0), 3.0};
  rew::RewardModel cm = rew::analytic_reward(c);
  CHECK(rew::reward(cm, vec1(-7.0)) == doctest::Approx(3.0));
  CHECK(rew::reward_grad(cm, vec1(0.0))[0] == 0.0);

  CHECK_THROWS_AS(rew::reward_features(cm, Eigen::MatrixXd::Zero(1, 3), 1),
                  std::invalid_argument);
}

TEST_CASE("reward feature slices and splice identity") {
  Rng rng = Rng::stream(1, "test.rew_slices");
  rew::RewardModel m = rew::learned_reward(nn::make_mlp({2, 16, 16, 16, 1}, rng));
  Eigen::MatrixXd z0 = rng.normal_mat(2, 7);
  Eigen::RowVectorXd full = rew::reward_batch(m, z0);

  // j = 1 hands back the raw input
  CHECK(rew::reward_features(m, z0, 1) == z0);

  // j = depth: penultimate activations, checked against a hand computation
  Eigen::MatrixXd h = z0;
  for (int l = 0; l < m.depth() - 1; ++l) {
    Eigen::MatrixXd a = (m.mlp.layers[l].w * h).colwise() + m.mlp.layers[l].b;
    h = a.array() / (1.0 + (-a.array()).exp());
  }
  CHECK(rew::reward_features(m, z0, m.depth()).isApprox(h, 1e-14));

  for (int j = 1; j <= m.depth(); ++j) {
    Eigen::MatrixXd feats = rew::reward_features(m, z0, j);
    CHECK(rew::reward_suffix(m, feats, j) == full);  // bit-exact splice
  }

  CHECK_THROWS_AS(rew::reward_features(m, z0, 0), std::invalid_argument);
  CHECK_THROWS_AS(rew::reward_features(m, z0, 5), std::invalid_argument);
}

TEST_CASE("reward gradient matches finite differences") {
  Rng rng = Rng::stream(2, "test.rew_grad");
  rew::RewardModel m = rew::learned_reward(nn::make_mlp({3, 12, 12, 1}, rng));
  Eigen::VectorXd z = rng.normal_vec(3);
  Eigen::VectorXd g = rew::reward_grad(m, z);
  const double h = 1e-6;
  for (int i = 0; i < 3; ++i) {
    Eigen::VectorXd zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    const double fd = (rew::reward(m, zp) - rew::reward(m, zm)) / (2 * h);
    CHECK(g[i] == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("surrogate fits a linear reward") {
  Eigen::VectorXd a(2);
  a << 0.8, -0.5;
  const double b = 0.3;
  rew::RewardTrainConfig cfg;
  cfg.steps = 9000;
  cfg.seed = 5;
  rew::RewardFitReport report;
  rew::RewardModel m = rew::train_reward_surrogate(
      2, [&](const Eigen::VectorXd& z) { return a.dot(z) + b; }, cfg, &report);

  CHECK(report.heldout_mean_abs_err < 0.01);
  CHECK(report.heldout_max_abs_err < 0.02);

  // loss decreased over training
  CHECK(report.loss.back() < report.loss.front());
}

TEST_CASE("surrogate is monotone on a 1d linear target") {
  rew::RewardTrainConfig cfg;
  cfg.steps = 5000;
  cfg.seed = 6;
  rew::RewardModel m = rew::train_reward_surrogate(
      1, [](const Eigen::VectorXd& z) { return 2.0 * z[0]; }, cfg, nullptr);
  int violations = 0;
  double prev = -1e300;
  for (int i = 0; i < 200; ++i) {
    const double x = -4.0 + 8.0 * i / 199.0;
    const double y = rew::reward(m, vec1(x));
    if (y < prev) ++violations;
    prev = y;
  }
  CHECK(violations <= 2);
}

TEST_CASE("surrogate training is deterministic; zero steps keep the init") {
  rew::RewardTrainConfig cfg;
  cfg.steps = 0;
  cfg.seed = 9;
  auto target = [](const Eigen::VectorXd& z) { return z[0]; };
  rew::RewardModel m1 = rew::train_reward_surrogate(1, target, cfg);
  rew::RewardModel m2 = rew::train_reward_surrogate(1, target, cfg);
  CHECK(nn::flatten_params(m1.mlp) == nn::flatten_params(m2.mlp));

  cfg.steps = 50;
  rew::RewardModel m3 = rew::train_reward_surrogate(1, target, cfg);
  rew::RewardModel m4 = rew::train_reward_surrogate(1, target, cfg);
  CHECK(nn::flatten_params(m3.mlp) == nn::flatten_params(m4.mlp));
  CHECK(nn::flatten_params(m3.mlp) != nn::flatten_params(m1.mlp));
}

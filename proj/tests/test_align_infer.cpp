#include "valstitch/align_infer.hpp"

#include <cmath>

#include "doctest.h"
#include "valstitch/schedule.hpp"
#include "valstitch/stats.hpp"

using namespace valstitch;

namespace {

gmm::GmmSpec bimodal1d() {
  Eigen::VectorXd w(2);
  w << 0.5, 0.5;
  Eigen::VectorXd m1(1), m2(1);
  m1 << -2.0;
  m2 << 2.0;
  return gmm::isotropic_gmm(w, {m1, m2}, 0.25);
}

Eigen::VectorXd vec1(double x) {
  Eigen::VectorXd v(1);
  v << x;
  return v;
}

}  // namespace

TEST_CASE("zero guidance reproduces the plain sampler bit-exactly") {
  auto g = bimodal1d();
  gmm::LinearReward r{vec1(1.0), 0.0};
  stitch::AnalyticEstimator est(g, r, stitch::AnalyticMode::Soft);
  auto u = gen::oracle_velocity(g);

  steer::GuidanceConfig cfg;
  cfg.scale = 0.0;
  cfg.sampler.n_steps = 32;
  Rng r1 = Rng::stream(5, "test.guided");
  Rng r2 = Rng::stream(5, "test.guided");
  gen::SampleResult guided = steer::guided_sample(u, est, 1, cfg, 64, r1);
  gen::SamplerConfig sc{32, gen::SamplerMode::Sde, 0};
  gen::SampleResult plain = gen::sample(u, 1, sc, 64, r2);
  CHECK(guided.samples == plain.samples);

  // a constant reward yields a zero gradient, so guidance changes nothing
  stitch::AnalyticEstimator flat(g, {vec1(0.0), 3.0}, stitch::AnalyticMode::Standard);
  Rng r3 = Rng::stream(5, "test.guided");
  steer::GuidanceConfig on = cfg;
  on.scale = 1.0;
  gen::SampleResult constant = steer::guided_sample(u, flat, 1, on, 64, r3);
  CHECK(constant.samples == plain.samples);
}

TEST_CASE("soft-value guidance samples the tilted distribution") {
  auto g = bimodal1d();
  gmm::LinearReward r{vec1(1.0), 0.0};
  stitch::AnalyticEstimator est(g, r, stitch::AnalyticMode::Soft);

  steer::GuidanceConfig cfg;
  cfg.scale = 1.0;
  cfg.sampler.n_steps = 200;
  Rng rng = Rng::stream(6, "test.tilt_quick");
  steer::CostReport cost;
  gen::SampleResult res =
      steer::guided_sample(gen::oracle_velocity(g), est, 1, cfg, 2000, rng, &cost);
  CHECK(cost.estimator_evals == 2000.0 * 200);

  gmm::GmmSpec target = gmm::tilted(g, r);
  Rng ref = Rng::stream(6, "test.tilt_ref");
  Eigen::MatrixXd direct = gmm::sample(target, 2000, ref);
  Rng proj = Rng::stream(6, "test.tilt_proj");
  CHECK(stats::sliced_w1(res.samples, direct, 8, proj) < 0.15);
}

TEST_CASE("best of n") {
  auto g = bimodal1d();
  gmm::LinearReward r{vec1(1.0), 0.0};
  auto u = gen::oracle_velocity(g);
  auto reward_fn = [&](const Eigen::VectorXd& z) { return r(z); };
  gen::SamplerConfig sc{24, gen::SamplerMode::Sde, 0};

  // N = 1 is a plain sample
  Rng r1 = Rng::stream(7, "test.bon");
  Rng r2 = Rng::stream(7, "test.bon");
  steer::BestOfNResult one = steer::best_of_n(u, 1, reward_fn, 1, sc, r1);
  gen::SampleResult plain = gen::sample(u, 1, sc, 1, r2);
  CHECK(one.best == plain.samples.col(0));

  // determinism
  Rng r3 = Rng::stream(8, "test.bon_det");
  Rng r4 = Rng::stream(8, "test.bon_det");
  CHECK(steer::best_of_n(u, 1, reward_fn, 4, sc, r3).best_reward ==
        steer::best_of_n(u, 1, reward_fn, 4, sc, r4).best_reward);

  // the expected maximum grows with N
  Rng trials = Rng::stream(9, "test.bon_order");
  double mean1 = 0, mean4 = 0, mean16 = 0;
  const int reps = 300;
  for (int i = 0; i < reps; ++i) {
    mean1 += steer::best_of_n(u, 1, reward_fn, 1, sc, trials).best_reward;
    mean4 += steer::best_of_n(u, 1, reward_fn, 4, sc, trials).best_reward;
    mean16 += steer::best_of_n(u, 1, reward_fn, 16, sc, trials).best_reward;
  }
  CHECK(mean1 / reps < mean4 / reps);
  CHECK(mean4 / reps < mean16 / reps);
}

TEST_CASE("multinomial resampling matches the softmax distribution") {
  Eigen::VectorXd logp(3);
  logp << std::log(1.0), std::log(2.0), std::log(1.0);
  Rng rng = Rng::stream(10, "test.resample");
  std::vector<long> counts(3, 0);
  const int reps = 10000;
  for (int i = 0; i < reps; ++i) {
    bool degen = false;
    auto anc = steer::resample_multinomial(logp, 1.0, rng, &degen);
    CHECK(!degen);
    CHECK(anc.size() == 3);
    for (int a : anc) counts[a]++;
  }
  CHECK(stats::chi2_gof_pvalue(counts, {0.25, 0.5, 0.25}) > 0.01);

  // equal potentials resample uniformly
  Eigen::VectorXd equal = Eigen::VectorXd::Zero(4);
  std::vector<long> ucounts(4, 0);
  for (int i = 0; i < reps; ++i)
    for (int a : steer::resample_multinomial(equal, 1.0, rng)) ucounts[a]++;
  CHECK(stats::chi2_gof_pvalue(ucounts, {0.25, 0.25, 0.25, 0.25}) > 0.01);

  // degenerate potentials fall back to uniform with a flag
  Eigen::VectorXd ninf = Eigen::VectorXd::Constant(
      3, -std::numeric_limits<double>::infinity());
  bool degen = false;
  auto anc = steer::resample_multinomial(ninf, 1.0, rng, &degen);
  CHECK(degen);
  CHECK(anc.size() == 3);
}

TEST_CASE("fk steering with one particle and no events is a plain SDE chain") {
  auto g = bimodal1d();
  gmm::LinearReward r{vec1(1.0), 0.0};
  stitch::AnalyticEstimator est(g, r, stitch::AnalyticMode::Standard);
  auto u = gen::oracle_velocity(g);

  steer::FkConfig cfg;
  cfg.n_particles = 1;
  cfg.m_proposals = 1;
  cfg.sampler.n_steps = 16;
  cfg.seed = 21;
  steer::FkResult res = steer::fk_steer(u, est, 1, cfg);
  CHECK(res.ancestry.empty());

  // reconstruct the same chain from the named noise streams
  Eigen::VectorXd grid = gen::time_grid(16);
  Rng init = Rng::stream(cfg.seed, "fk.init");
  Eigen::MatrixXd z = init.normal_mat(1, 1);
  for (int s = 1; s <= 16; ++s) {
    Rng noise = Rng::stream(cfg.seed, "fk.noise", (std::uint64_t(s) * 1 + 0) << 6);
    z = gen::sde_step(u, z, grid[s - 1], grid[s], s == 1, noise);
  }
  CHECK(res.particles == z);
}

TEST_CASE("fk steering improves the mean terminal reward") {
  auto g = bimodal1d();
  gmm::LinearReward r{vec1(1.0), 0.0};
  stitch::AnalyticEstimator est(g, r, stitch::AnalyticMode::Standard);
  auto u = gen::oracle_velocity(g);

  const int reps = 200;
  std::vector<double> guided(reps), plain(reps);
  for (int i = 0; i < reps; ++i) {
    steer::FkConfig cfg = steer::default_fk_config(32, 4, 1, 1000 + i);
    steer::FkResult res = steer::fk_steer(u, est, 1, cfg);
    double acc = 0;
    for (int n = 0; n < 4; ++n) acc += r(res.particles.col(n));
    guided[i] = acc / 4;

    Rng prng = Rng::stream(1000 + i, "unguided");
    gen::SamplerConfig sc{32, gen::SamplerMode::Sde, 0};
    auto base = gen::sample(u, 1, sc, 4, prng);
    acc = 0;
    for (int n = 0; n < 4; ++n) acc += r(base.samples.col(n));
    plain[i] = acc / 4;
  }
  CHECK(stats::paired_t_pvalue_greater(guided, plain) < 0.01);
}

TEST_CASE("compute budget accounting identities") {
  auto g = bimodal1d();
  gmm::LinearReward r{vec1(1.0), 0.0};
  stitch::AnalyticEstimator est(g, r, stitch::AnalyticMode::Standard);
  auto u = gen::oracle_velocity(g);

  // M = 1, no resampling: exactly N x n_steps full evaluations; the only
  // estimator work is the terminal value refresh
  steer::FkConfig cfg;
  cfg.n_particles = 5;
  cfg.m_proposals = 1;
  cfg.sampler.n_steps = 12;
  cfg.seed = 3;
  steer::CostReport budget = steer::compute_budget(cfg, est);
  CHECK(budget.full_model_evals == 5.0 * 12);
  CHECK(budget.estimator_evals == 5.0);

  steer::FkResult run = steer::fk_steer(u, est, 1, cfg);
  CHECK(run.cost.full_model_evals == budget.full_model_evals);
  CHECK(run.cost.estimator_evals == budget.estimator_evals);

  // with proposals and resampling, the static budget matches the actual run
  steer::FkConfig cfg2 = steer::default_fk_config(16, 4, 3, 9);
  steer::CostReport b2 = steer::compute_budget(cfg2, est);
  steer::FkResult run2 = steer::fk_steer(u, est, 1, cfg2);
  CHECK(run2.cost.estimator_evals == b2.estimator_evals);
  CHECK(run2.cost.full_model_evals == b2.full_model_evals);
}

TEST_CASE("default schedule sets") {
  steer::FkConfig cfg = steer::default_fk_config(40, 4, 2, 0);
  // proposal scaling covers the first 40% of the trajectory
  CHECK(cfg.proposal_steps.front() == 1);
  CHECK(cfg.proposal_steps.back() == 16);
  // resampling every 4th step within the middle 60%
  for (int s : cfg.resample_steps) {
    CHECK(s % 4 == 0);
    CHECK(s >= 8);
    CHECK(s <= 32);
  }
}

#include "valstitch/stitch.hpp"

#include <cmath>
#include <filesystem>
#include <map>

#include "doctest.h"

using namespace valstitch;

namespace {

gmm::GmmSpec twomode2d() {
  Eigen::VectorXd w(2);
  w << 0.5, 0.5;
  Eigen::VectorXd m1(2), m2(2);
  m1 << -2.0, -1.0;
  m2 << 2.0, 1.0;
  return gmm::isotropic_gmm(w, {m1, m2}, 0.3);
}

}  // namespace

TEST_CASE("closed-form interface fit recovers an exact linear relation") {
  Rng rng = Rng::stream(1, "test.fit");
  Eigen::MatrixXd f = rng.normal_mat(16, 120);
  Eigen::MatrixXd a = rng.normal_mat(8, 16);
  Eigen::MatrixXd g = a * f;
  stitch::StitchInterface iface = stitch::fit_interface_matrices(f, g, 1, 2);
  CHECK(iface.fit_loss < 1e-12);
  CHECK((iface.w - a).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("interface fit matches an independent least-squares route") {
  Rng rng = Rng::stream(2, "test.fit_oracle");
  Eigen::MatrixXd f = rng.normal_mat(16, 150);
  Eigen::MatrixXd g = rng.normal_mat(8, 150);
  stitch::StitchInterface iface = stitch::fit_interface_matrices(f, g, 1, 1);
  Eigen::MatrixXd w_qr =
      f.transpose().colPivHouseholderQr().solve(g.transpose()).transpose();
  const double loss_qr = (w_qr * f - g).squaredNorm() / 150.0;
  CHECK(std::abs(iface.fit_loss - loss_qr) <= 1e-8 * std::max(1.0, loss_qr));

  // any perturbation strictly increases the empirical loss
  Rng prng = Rng::stream(3, "test.fit_perturb");
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::MatrixXd delta = prng.normal_mat(8, 16);
    delta *= 1e-3 / delta.norm();
    const double perturbed = ((iface.w + delta) * f - g).squaredNorm() / 150.0;
    CHECK(perturbed > iface.fit_loss);
  }
}

TEST_CASE("rank-degenerate probes raise an error") {
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(4, 50);
  Eigen::MatrixXd g = Eigen::MatrixXd::Ones(2, 50);
  CHECK_THROWS_AS(stitch::fit_interface_matrices(f, g, 1, 1), std::runtime_error);
}

TEST_CASE("interface search ranks, breaks ties, and recovers plants") {
  Rng rng = Rng::stream(4, "test.search");
  std::map<int, Eigen::MatrixXd> fs, gs;
  for (int i = 1; i <= 3; ++i) fs[i] = rng.normal_mat(12, 100);
  for (int j = 1; j <= 4; ++j) gs[j] = rng.normal_mat(6, 100);
  Eigen::MatrixXd a = rng.normal_mat(6, 12);
  gs[2] = a * fs[3];

  auto gf = [&](int i) { return fs.at(i); };
  auto rf = [&](int j) { return gs.at(j); };
  stitch::SearchResult res = stitch::search_interfaces(gf, {1, 2, 3}, rf, {1, 2, 3, 4});
  CHECK(res.ranked.size() == 12);
  CHECK(res.best().i == 3);
  CHECK(res.best().j == 2);
  CHECK(res.best().fit_loss < 1e-10);
  for (size_t k = 1; k < res.ranked.size(); ++k)
    CHECK(res.ranked[k - 1].fit_loss <= res.ranked[k].fit_loss);

  // single candidate pair
  stitch::SearchResult one = stitch::search_interfaces(gf, {2}, rf, {3});
  CHECK(one.best().i == 2);
  CHECK(one.best().j == 3);

  // degenerate pairs are skipped and recorded
  std::map<int, Eigen::MatrixXd> fz = fs;
  fz[1] = Eigen::MatrixXd::Zero(12, 100);
  auto gzf = [&](int i) { return fz.at(i); };
  stitch::SearchResult skipped =
      stitch::search_interfaces(gzf, {1, 2, 3}, rf, {1, 2});
  CHECK(skipped.skipped.size() == 2);
  CHECK(skipped.ranked.size() == 4);
}

TEST_CASE("stitch layer is the affine map at init and differentiates exactly") {
  Rng rng = Rng::stream(5, "test.layer");
  stitch::StitchInterface iface;
  iface.i = 1;
  iface.j = 1;
  iface.w = rng.normal_mat(10, 14);
  stitch::StitchLayer layer = stitch::make_stitch_layer(iface, rng);
  CHECK(layer.g1_w.rows() == 1);  // bottleneck 10/8 -> 1

  Eigen::MatrixXd h = rng.normal_mat(14, 6);
  Eigen::MatrixXd want = iface.w * h;  // f_b = 0, residual branch zero at init
  CHECK(layer.forward(h).isApprox(want, 1e-14));

  // with a live residual branch, backward matches finite differences
  layer.g2_w = 0.4 * rng.normal_mat(10, 1);
  layer.g2_b = 0.1 * rng.normal_vec(10);
  Eigen::MatrixXd probe = rng.normal_mat(10, 6);
  stitch::StitchLayer::Tape tape;
  layer.forward(h, tape);
  stitch::StitchLayer::Grads grads = layer.zero_grads();
  Eigen::MatrixXd dh = layer.backward(tape, probe, grads);

  Eigen::VectorXd params = layer.flatten_params();
  Eigen::VectorXd gflat = layer.flatten_grads(grads);
  const double eps = 1e-6;
  for (Eigen::Index k = 0; k < params.size(); k += 5) {
    Eigen::VectorXd p = params;
    p[k] += eps;
    layer.set_params(p);
    const double lp = (layer.forward(h).array() * probe.array()).sum();
    p[k] -= 2 * eps;
    layer.set_params(p);
    const double lm = (layer.forward(h).array() * probe.array()).sum();
    layer.set_params(params);
    const double fd = (lp - lm) / (2 * eps);
    CHECK(std::abs(fd - gflat[k]) <= 1e-5 * std::max({1.0, std::abs(fd)}));
  }
  // input gradient
  for (int r = 0; r < 3; ++r) {
    Eigen::MatrixXd hp = h, hm = h;
    hp(r, 2) += eps;
    hm(r, 2) -= eps;
    const double fd = ((layer.forward(hp).array() * probe.array()).sum() -
                       (layer.forward(hm).array() * probe.array()).sum()) /
                      (2 * eps);
    CHECK(dh(r, 2) == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("stage-2 training freezes the prefix and fits a constant teacher") {
  auto g = twomode2d();
  Rng rng = Rng::stream(6, "test.stage2");
  gen::VelocityModel generator = gen::make_velocity_model(2, rng, {32, 32, 32});
  rew::RewardModel surrogate =
      rew::learned_reward(nn::make_mlp({2, 16, 16, 16, 1}, rng));

  Rng probe_rng = Rng::stream(6, "test.stage2_probe");
  stitch::ProbeSet probes = stitch::make_probe_set(g, 120, probe_rng);
  stitch::SearchResult search =
      stitch::search_interfaces(generator, surrogate, probes, {1, 2, 3}, {1, 2, 3, 4});

  Rng init_rng = Rng::stream(6, "test.stage2_init");
  stitch::StitchedValueModel model =
      stitch::assemble_stitched_model(generator, surrogate, search.best(), init_rng);

  // zero-init contract: the model output is exactly suffix(F(features))
  Eigen::MatrixXd z = probe_rng.normal_mat(2, 5);
  Eigen::MatrixXd feats = generator.features(z, 0.4, model.i);
  Eigen::MatrixXd lin = (model.layer.f_w * feats).colwise() + model.layer.f_b;
  Eigen::RowVectorXd via_parts = rew::reward_suffix(model.reward_tail, lin, model.j);
  CHECK(model.value_batch(z, 0.4) == via_parts);

  // constant teacher: the trained model collapses to that constant
  Eigen::VectorXd zero_a = Eigen::VectorXd::Zero(2);
  rew::RewardModel constant = rew::analytic_reward({zero_a, 1.7});
  Eigen::VectorXd gen_before = nn::flatten_params(model.generator.mlp);
  stitch::StitchTrainConfig cfg;
  cfg.steps = 4000;
  cfg.batch = 128;
  cfg.seed = 16;
  stitch::StitchTrainHistory hist = stitch::train_stitch(model, g, constant, cfg);
  CHECK(hist.loss.back() < hist.loss.front());

  // frozen-prefix contract, bit-identical
  CHECK(nn::flatten_params(model.generator.mlp) == gen_before);

  Rng eval_rng = Rng::stream(6, "test.stage2_eval");
  double rmse = 0.0;
  const int n = 400;
  for (int i = 0; i < n; ++i) {
    const double t = eval_rng.uniform();
    Eigen::MatrixXd zt = (1.0 - t) * gmm::sample(g, 1, eval_rng) +
                         t * eval_rng.normal_mat(2, 1);
    const double err = model.value(zt.col(0), t) - 1.7;
    rmse += err * err;
  }
  rmse = std::sqrt(rmse / n);
  CHECK(rmse < 0.01);
}

TEST_CASE("value estimators agree with their references") {
  auto g = twomode2d();
  gmm::LinearReward r{Eigen::VectorXd::Zero(2), 0.0};
  r.a << 0.8, 0.6;

  stitch::AnalyticEstimator analytic(g, r, stitch::AnalyticMode::Standard);
  stitch::AnalyticEstimator soft(g, r, stitch::AnalyticMode::Soft);
  Rng rng = Rng::stream(7, "test.estimators");
  for (int i = 0; i < 20; ++i) {
    const double t = 0.05 + 0.9 * rng.uniform();
    Eigen::VectorXd z = 2.0 * rng.normal_vec(2);
    CHECK(analytic.value(z, t) == gmm::value(g, r, t, z));
    CHECK(soft.value(z, t) == gmm::soft_value(g, r, t, z));
    CHECK(soft.value(z, t) >= analytic.value(z, t) - 1e-12);
  }

  // gradient of every differentiable variant matches finite differences of
  // its own value
  Rng net_rng = Rng::stream(7, "test.est_nets");
  gen::VelocityModel vm = gen::make_velocity_model(2, net_rng, {24, 24});
  rew::RewardModel learned =
      rew::learned_reward(nn::make_mlp({2, 12, 12, 1}, net_rng));
  stitch::TweedieEstimator tweedie_learned(vm, learned);
  stitch::TweedieEstimator tweedie_oracle(g, rew::analytic_reward(r));

  stitch::ProbeSet probes = stitch::make_probe_set(g, 80, net_rng);
  stitch::SearchResult search =
      stitch::search_interfaces(vm, learned, probes, {1, 2}, {1, 2, 3});
  stitch::StitchedValueModel svm =
      stitch::assemble_stitched_model(vm, learned, search.best(), net_rng);
  stitch::StitchEstimator stitched(svm);

  std::vector<const stitch::ValueEstimator*> ests = {&analytic, &soft,
                                                     &tweedie_learned,
                                                     &tweedie_oracle, &stitched};
  const double h = 1e-5;
  for (const auto* est : ests) {
    CHECK(est->differentiable());
    for (int i = 0; i < 10; ++i) {
      const double t = 0.1 + 0.8 * rng.uniform();
      Eigen::VectorXd z = 1.5 * rng.normal_vec(2);
      Eigen::VectorXd grad = est->grad_value(z, t);
      for (int c = 0; c < 2; ++c) {
        Eigen::VectorXd zp = z, zm = z;
        zp[c] += h;
        zm[c] -= h;
        const double fd = (est->value(zp, t) - est->value(zm, t)) / (2 * h);
        CHECK(std::abs(grad[c] - fd) <=
              1e-4 * std::max({1.0, std::abs(fd), std::abs(grad[c])}));
      }
    }
  }

  // constant reward has zero gradient
  stitch::AnalyticEstimator constant(g, {Eigen::VectorXd::Zero(2), 2.0},
                                     stitch::AnalyticMode::Standard);
  CHECK(constant.grad_value(rng.normal_vec(2), 0.5).norm() == 0.0);

  // single gaussian, r(x) = x, t = 0.5: gradient is exactly 1
  Eigen::VectorXd w1(1);
  w1 << 1.0;
  auto std1 = gmm::isotropic_gmm(w1, {Eigen::VectorXd::Zero(1)}, 1.0);
  Eigen::VectorXd a1(1);
  a1 << 1.0;
  stitch::AnalyticEstimator unit(std1, {a1, 0.0}, stitch::AnalyticMode::Standard);
  Eigen::VectorXd z1(1);
  z1 << 0.4;
  CHECK(unit.grad_value(z1, 0.5)[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("mc estimator converges to the analytic value and is deterministic") {
  Eigen::VectorXd w(2);
  w << 0.5, 0.5;
  Eigen::VectorXd m1(1), m2(1);
  m1 << -2.0;
  m2 << 2.0;
  auto g = gmm::isotropic_gmm(w, {m1, m2}, 0.25);
  Eigen::VectorXd a(1);
  a << 1.0;
  gmm::LinearReward r{a, 0.0};

  stitch::McEstimator mc(gen::oracle_velocity(g), rew::analytic_reward(r), 4096, 96,
                         99);
  Eigen::VectorXd z(1);
  z << 0.3;
  const double t = 0.5;
  double se = 0.0;
  const double est = mc.value_with_stderr(z, t, &se);
  const double exact = gmm::value(g, r, t, z);
  CHECK(std::abs(est - exact) < 3.0 * se + 0.02);

  // determinism: same (z, t) gives a bit-identical estimate
  CHECK(mc.value(z, t) == est);

  CHECK_THROWS_AS(mc.grad_value(z, t), std::logic_error);
  CHECK(!mc.differentiable());
}

TEST_CASE("estimator costs reflect the architecture") {
  Rng rng = Rng::stream(8, "test.costs");
  gen::VelocityModel vm = gen::make_velocity_model(2, rng, {64, 64, 64});
  rew::RewardModel learned =
      rew::learned_reward(nn::make_mlp({2, 32, 32, 32, 1}, rng));

  stitch::ProbeSet probes =
      stitch::make_probe_set(twomode2d(), 60, rng);
  stitch::SearchResult search =
      stitch::search_interfaces(vm, learned, probes, {1, 2, 3}, {1, 2, 3, 4});
  stitch::StitchedValueModel svm =
      stitch::assemble_stitched_model(vm, learned, search.best(), rng);

  stitch::StitchEstimator stitched(svm);
  stitch::TweedieEstimator tweedie(vm, learned);
  // cost ratio above one whenever the prefix is shallower than the full model
  CHECK(stitched.cost_at(0.5).layer_evals < tweedie.cost_at(0.5).layer_evals);
  CHECK(tweedie.cost_at(0.5).full_model_evals == 1.0);
  CHECK(tweedie.cost_at(0.5).decoder_evals == 1.0);
  CHECK(stitched.cost_at(0.5).prefix_evals == 1.0);
  CHECK(stitched.cost_at(0.5).decoder_evals == 0.0);

  stitch::McEstimator mc(vm.as_fn(), learned, 16, 64, 3);
  // mid-trajectory: about 16 x remaining-step full evaluations
  const double remaining = mc.cost_at(0.5).full_model_evals / 16.0;
  CHECK(remaining == doctest::Approx(32).epsilon(0.05));
  CHECK(mc.cost_at(0.5).decoder_evals == 16.0);
}

TEST_CASE("stitched checkpoint round trip preserves values") {
  Rng rng = Rng::stream(9, "test.stitch_ckpt");
  gen::VelocityModel vm = gen::make_velocity_model(2, rng, {16, 16});
  rew::RewardModel learned = rew::learned_reward(nn::make_mlp({2, 8, 8, 1}, rng));
  stitch::ProbeSet probes = stitch::make_probe_set(twomode2d(), 40, rng);
  stitch::SearchResult search =
      stitch::search_interfaces(vm, learned, probes, {1}, {1, 2});
  stitch::StitchedValueModel svm =
      stitch::assemble_stitched_model(vm, learned, search.best(), rng);

  const std::string path =
      (std::filesystem::temp_directory_path() / "valstitch_svm.ckpt").string();
  stitch::save_stitched(svm, path);
  stitch::StitchedValueModel back = stitch::load_stitched(path);
  Eigen::VectorXd z = rng.normal_vec(2);
  CHECK(back.value(z, 0.37) == svm.value(z, 0.37));
  std::filesystem::remove(path);
}

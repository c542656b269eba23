#include "valstitch/reward_model.hpp"

#include <cmath>
#include <stdexcept>

namespace valstitch::rew {

RewardModel analytic_reward(const gmm::LinearReward& r) {
  RewardModel m;
  m.kind = RewardKind::Analytic;
  m.linear = r;
  return m;
}

RewardModel learned_reward(nn::Mlp mlp) {
  if (mlp.output_dim() != 1)
    throw std::invalid_argument("learned_reward: needs a scalar output head");
  RewardModel m;
  m.kind = RewardKind::Learned;
  m.mlp = std::move(mlp);
  return m;
}

double reward(const RewardModel& m, const Eigen::VectorXd& z0) {
  if (m.kind == RewardKind::Analytic) return m.linear(z0);
  return nn::forward(m.mlp, z0)(0, 0);
}

Eigen::RowVectorXd reward_batch(const RewardModel& m, const Eigen::MatrixXd& z0) {
  if (m.kind == RewardKind::Analytic)
    return (m.linear.a.transpose() * z0).array() + m.linear.b;
  return nn::forward(m.mlp, z0).row(0);
}

Eigen::VectorXd reward_grad(const RewardModel& m, const Eigen::VectorXd& z0) {
  if (m.kind == RewardKind::Analytic) return m.linear.a;
  nn::Tape tape;
  nn::forward(m.mlp, z0, &tape);
  return nn::backward(m.mlp, tape, Eigen::MatrixXd::Ones(1, 1));
}

Eigen::MatrixXd reward_features(const RewardModel& m, const Eigen::MatrixXd& z0, int j) {
  if (m.kind != RewardKind::Learned)
    throw std::invalid_argument("reward_features: analytic reward has no layers");
  if (j < 1 || j > m.depth())
    throw std::invalid_argument("reward_features: slice index out of range");
  if (j == 1) return z0;  // empty prefix
  return nn::forward_truncated(m.mlp, z0, j - 1);
}

Eigen::RowVectorXd reward_suffix(const RewardModel& m, const Eigen::MatrixXd& h, int j) {
  if (m.kind != RewardKind::Learned)
    throw std::invalid_argument("reward_suffix: analytic reward has no layers");
  return nn::forward_suffix(m.mlp, h, j).row(0);
}

RewardModel train_reward_surrogate(int dim,
                                   const std::function<double(const Eigen::VectorXd&)>& target,
                                   const RewardTrainConfig& config,
                                   RewardFitReport* report) {
  if (dim < 1) throw std::invalid_argument("train_reward_surrogate: bad dim");
  Rng rng = Rng::stream(config.seed, "train_reward.init");
  std::vector<int> widths;
  widths.push_back(dim);
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(1);
  nn::Mlp mlp = nn::make_mlp(widths, rng);

  Rng data_rng = Rng::stream(config.seed, "train_reward.data");
  nn::AdamW opt;
  opt.lr = config.lr;
  Eigen::VectorXd params = nn::flatten_params(mlp);
  opt.init(params.size());

  RewardFitReport fit;
  const int B = config.batch;
  const double w = config.box_halfwidth;
  for (int step = 0; step < config.steps; ++step) {
    opt.lr = config.lr * 0.5 * (1.0 + std::cos(M_PI * double(step) / config.steps));
    Eigen::MatrixXd x(dim, B);
    for (int c = 0; c < B; ++c)
      for (int r0 = 0; r0 < dim; ++r0) x(r0, c) = data_rng.uniform(-w, w);
    Eigen::RowVectorXd y(B);
    for (int c = 0; c < B; ++c) y[c] = target(x.col(c));

    nn::Tape tape;
    Eigen::MatrixXd out = nn::forward(mlp, x, &tape);
    Eigen::MatrixXd resid = out.row(0) - y;
    const double loss = resid.squaredNorm() / B;
    if (!std::isfinite(loss))
      throw std::runtime_error("train_reward_surrogate: training failure at step " +
                               std::to_string(step));
    fit.loss.push_back(loss);
    nn::Gradients grads = nn::zero_gradients(mlp);
    nn::backward(mlp, tape, 2.0 * resid / B, &grads);
    opt.step(params, nn::flatten_gradients(mlp, grads));
    nn::set_params(mlp, params);
  }

  // held-out evaluation over [-4, 4]^d
  Rng eval_rng = Rng::stream(config.seed, "train_reward.eval");
  std::vector<Eigen::VectorXd> pts;
  if (dim == 1) {
    for (int i = 0; i <= 200; ++i)
      pts.push_back(Eigen::VectorXd::Constant(1, -4.0 + 8.0 * i / 200.0));
  } else if (dim == 2) {
    for (int i = 0; i <= 40; ++i)
      for (int j = 0; j <= 40; ++j) {
        Eigen::VectorXd p(2);
        p << -4.0 + 8.0 * i / 40.0, -4.0 + 8.0 * j / 40.0;
        pts.push_back(p);
      }
  } else {
    for (int i = 0; i < 2000; ++i) {
      Eigen::VectorXd p(dim);
      for (int r0 = 0; r0 < dim; ++r0) p[r0] = eval_rng.uniform(-4.0, 4.0);
      pts.push_back(p);
    }
  }
  double sum_abs = 0.0, max_abs = 0.0;
  for (const auto& p : pts) {
    const double err = std::abs(nn::forward(mlp, p)(0, 0) - target(p));
    sum_abs += err;
    max_abs = std::max(max_abs, err);
  }
  fit.heldout_mean_abs_err = sum_abs / pts.size();
  fit.heldout_max_abs_err = max_abs;
  if (report) *report = fit;

  return learned_reward(std::move(mlp));
}

}  // namespace valstitch::rew

#include "valstitch/checkpoint.hpp"

namespace valstitch::rew {

void save_reward_model(const RewardModel& model, const std::string& path) {
  nn::Checkpoint ckpt;
  ckpt.meta["type"] = "reward-model";
  if (model.kind == RewardKind::Analytic) {
    ckpt.meta["kind"] = "analytic";
    ckpt.meta["bias"] = model.linear.b;
    ckpt.add_vector("reward.a", model.linear.a);
  } else {
    ckpt.meta["kind"] = "learned";
    nn::add_mlp(ckpt, "reward", model.mlp);
  }
  ckpt.save(path);
}

RewardModel load_reward_model(const std::string& path) {
  nn::Checkpoint ckpt = nn::Checkpoint::load(path);
  if (ckpt.meta.value("type", "") != "reward-model")
    throw std::runtime_error("load_reward_model: wrong checkpoint type in " + path);
  if (ckpt.meta.at("kind") == "analytic") {
    gmm::LinearReward r;
    r.a = ckpt.array("reward.a");
    r.b = ckpt.meta.at("bias").get<double>();
    return analytic_reward(r);
  }
  return learned_reward(nn::mlp_from_checkpoint(ckpt, "reward"));
}

}  // namespace valstitch::rew

#pragma once

#include <Eigen/Dense>

#include <vector>

#include "valstitch/gmm.hpp"
#include "valstitch/mlp.hpp"

// The clean-space reward model: either the exact linear reward or a small
// trained surrogate MLP with sliceable layers (the tail donor for stitching).
namespace valstitch::rew {

enum class RewardKind { Analytic, Learned };

struct RewardModel {
  RewardKind kind = RewardKind::Analytic;
  gmm::LinearReward linear;  // Analytic variant
  nn::Mlp mlp;               // Learned variant, scalar output head

  int depth() const { return mlp.depth(); }
};

RewardModel analytic_reward(const gmm::LinearReward& r);
RewardModel learned_reward(nn::Mlp mlp);

double reward(const RewardModel& m, const Eigen::VectorXd& z0);
Eigen::RowVectorXd reward_batch(const RewardModel& m, const Eigen::MatrixXd& z0);

// Gradient of the reward in the input (exact for both variants).
Eigen::VectorXd reward_grad(const RewardModel& m, const Eigen::VectorXd& z0);

// Hidden features feeding layer j: activations after layer j-1, with j = 1
// giving the raw input (stitching into the first layer). Learned variant only.
Eigen::MatrixXd reward_features(const RewardModel& m, const Eigen::MatrixXd& z0, int j);

// Applies layers j..depth to a hidden state; returns the scalar row.
Eigen::RowVectorXd reward_suffix(const RewardModel& m, const Eigen::MatrixXd& h, int j);

struct RewardTrainConfig {
  int steps = 8000;
  int batch = 256;
  double lr = 1e-3;
  double box_halfwidth = 5.0;  // training points are uniform over [-w, w]^d
  std::vector<int> hidden = {64, 64, 64};
  std::uint64_t seed = 2;
};

struct RewardFitReport {
  std::vector<double> loss;
  double heldout_mean_abs_err = 0.0;
  double heldout_max_abs_err = 0.0;
};

// Fits a surrogate MLP to a target reward on uniform box samples; the report
// carries held-out grid errors over [-4, 4]^d.
RewardModel train_reward_surrogate(int dim,
                                   const std::function<double(const Eigen::VectorXd&)>& target,
                                   const RewardTrainConfig& config,
                                   RewardFitReport* report = nullptr);

void save_reward_model(const RewardModel& model, const std::string& path);
RewardModel load_reward_model(const std::string& path);

}  // namespace valstitch::rew

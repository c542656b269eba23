#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "valstitch/stitch.hpp"
#include "valstitch/velocity.hpp"

// Training-time alignment: direct reward finetuning through the sampling
// chain (terminal and value-based variants) and reward-weighted forward
// regression with implicit positive/negative policies (terminal and
// value-based variants with the anchor bridge).
namespace valstitch::tune {

struct DraftConfig {
  int k_window = 1;        // terminal mode: backprop through the last K steps
  int stop_lo = 5;         // value mode: inclusive grid-index window for tau
  int stop_hi = 6;         // defaults are the tight-mid preset on 10 steps
  double reg_weight = 0.0; // weight on the output regularizer R(theta; theta_0)
  int rollout_steps = 10;
  int batch = 32;
  double lr = 1e-4;
  std::uint64_t seed = 11;
};

// Finetunes the generator by backpropagating a terminal reward (or an
// intermediate value estimate) through the SDE sampling chain.
class DraftTrainer {
 public:
  DraftTrainer(gen::VelocityModel model, DraftConfig config);

  // One optimizer step; returns the surrogate loss (-mean signal + reg).
  double step_terminal(const rew::RewardModel& reward, Rng& rng);
  double step_value(const stitch::ValueEstimator& estimator, Rng& rng);

  // Gradient of the current objective on a fresh rollout batch, without
  // updating parameters (exposed for gradient-direction diagnostics).
  Eigen::VectorXd gradient_terminal(const rew::RewardModel& reward, Rng& rng,
                                    double* loss_out = nullptr);
  Eigen::VectorXd gradient_value(const stitch::ValueEstimator& estimator, Rng& rng,
                                 double* loss_out = nullptr);

  const gen::VelocityModel& model() const { return model_; }
  const gen::VelocityModel& initial_model() const { return init_model_; }
  double rollout_full_evals() const { return rollout_full_evals_; }
  double estimator_prefix_evals() const { return estimator_prefix_evals_; }

 private:
  Eigen::VectorXd gradient_impl(const rew::RewardModel* reward,
                                const stitch::ValueEstimator* estimator, Rng& rng,
                                double* loss_out);

  gen::VelocityModel model_;
  gen::VelocityModel init_model_;
  DraftConfig cfg_;
  nn::AdamW opt_;
  Eigen::VectorXd params_;
  double rollout_full_evals_ = 0.0;
  double estimator_prefix_evals_ = 0.0;
};

struct NftConfig {
  double beta = 0.5;   // mixture strength of the implicit policies
  double rho = 0.9;    // EMA rate for the frozen data-collection policy
  double z_floor = 1e-6;  // floor on the per-group reward scale
  int group = 32;      // rollouts per training step
  int rollout_steps = 10;
  int stop_lo = 5;     // value mode: inclusive grid-index window for tau
  int stop_hi = 6;     // defaults are the tight-mid preset on 10 steps
  double lr = 1e-4;
  std::uint64_t seed = 13;
};

// Maps raw group rewards to optimality probabilities in [0,1]:
// group-mean-centered, scaled by the per-group standard deviation (with
// floor), clipped to [-1,1] and affinely mapped. Requires group size >= 2.
Eigen::VectorXd nft_normalize_rewards(const Eigen::VectorXd& raw, double z_floor);

class NftTrainer {
 public:
  NftTrainer(gen::VelocityModel model, NftConfig config);

  // One training step: group rollout from the frozen policy, reward (or value)
  // normalization, forward (or bridge) regression, EMA update of the frozen
  // policy. Returns the regression loss.
  double step_terminal(const std::function<double(const Eigen::VectorXd&)>& reward,
                       Rng& rng);
  double step_value(const stitch::ValueEstimator& estimator, Rng& rng);

  const gen::VelocityModel& model() const { return model_; }
  const gen::VelocityModel& old_model() const { return old_model_; }
  double rollout_full_evals() const { return rollout_full_evals_; }
  double estimator_prefix_evals() const { return estimator_prefix_evals_; }

 private:
  double step_impl(const std::function<double(const Eigen::VectorXd&)>* reward,
                   const stitch::ValueEstimator* estimator, Rng& rng);

  gen::VelocityModel model_;
  gen::VelocityModel old_model_;
  NftConfig cfg_;
  nn::AdamW opt_;
  Eigen::VectorXd params_;
  double rollout_full_evals_ = 0.0;
  double estimator_prefix_evals_ = 0.0;
};

// Stop-window presets over a grid of n_steps transitions, as fractions of the
// schedule: "high" (high-noise, 8-48%), "tight-mid" (48-68%, the default),
// "wide" (48-100%), "low" (low-noise, 80-100%). Returned as inclusive grid
// indices {lo, hi}.
std::pair<int, int> stop_window_preset(const std::string& name, int n_steps);

struct KlRlReport {
  double lambda_star = 1.0;
  double objective_at_star = 0.0;
  bool flat = false;
};

// Evaluates E_q[r] - KL(q || p) over the tilt family q_lambda by quadrature
// (1D mixtures) and locates the maximizing tilt strength by golden-section
// search. The maximizer of the reward-regularized objective is the unit tilt.
KlRlReport kl_rl_equivalence_check(const gmm::GmmSpec& g, const gmm::LinearReward& r);

}  // namespace valstitch::tune

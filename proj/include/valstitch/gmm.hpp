#pragma once

#include <Eigen/Dense>

#include <functional>
#include <vector>

#include "valstitch/rng.hpp"

// Closed-form ground truth for Gaussian-mixture data with linear rewards:
// densities, scores, posterior means, value functions, soft values, tilted
// distributions, and brute-force Monte Carlo oracles. Everything downstream
// is checked against this module.
namespace valstitch::gmm {

struct GmmSpec {
  Eigen::VectorXd weights;             // K, positive, sums to 1
  std::vector<Eigen::VectorXd> means;  // K vectors in R^d
  std::vector<Eigen::MatrixXd> covs;   // K symmetric positive-definite d x d

  int components() const { return static_cast<int>(weights.size()); }
  int dim() const { return means.empty() ? 0 : static_cast<int>(means[0].size()); }
};

// Validates invariants (weight sum, positivity, SPD covariances, d <= 8,
// K <= 8) and returns the spec. Throws std::invalid_argument on violation.
GmmSpec make_gmm(Eigen::VectorXd weights, std::vector<Eigen::VectorXd> means,
                 std::vector<Eigen::MatrixXd> covs);

GmmSpec isotropic_gmm(const Eigen::VectorXd& weights,
                      const std::vector<Eigen::VectorXd>& means, double var);

struct LinearReward {
  Eigen::VectorXd a;
  double b = 0.0;
  double operator()(const Eigen::VectorXd& z) const { return a.dot(z) + b; }
};

// Marginal p_t of the forward path: component k keeps its weight, mean
// alpha_t mu_k, covariance alpha_t^2 Sigma_k + sigma_t^2 I.
GmmSpec marginal(const GmmSpec& g, double t);

double log_density(const GmmSpec& g, const Eigen::VectorXd& z);

// Score of the time-t marginal, grad_z log p_t(z). Exact.
Eigen::VectorXd score(const GmmSpec& g, double t, const Eigen::VectorXd& z);
Eigen::MatrixXd score_batch(const GmmSpec& g, double t, const Eigen::MatrixXd& zs);

// Hessian of log p_t at z (used for value gradients via Tweedie).
Eigen::MatrixXd log_density_hessian(const GmmSpec& g, double t,
                                    const Eigen::VectorXd& z);

// Posterior mean E[z_0 | z_t = z] (the denoiser). Requires t < 1.
Eigen::VectorXd posterior_mean(const GmmSpec& g, double t, const Eigen::VectorXd& z);
Eigen::MatrixXd posterior_mean_batch(const GmmSpec& g, double t,
                                     const Eigen::MatrixXd& zs);

// Standard value E[r(z_0) | z_t = z]; exact for linear rewards. t < 1.
double value(const GmmSpec& g, const LinearReward& r, double t,
             const Eigen::VectorXd& z);
Eigen::VectorXd value_grad(const GmmSpec& g, const LinearReward& r, double t,
                           const Eigen::VectorXd& z);

// Soft value log E[exp(r(z_0)) | z_t = z], exact via per-component Gaussian
// moment generating functions under the posterior mixture. t < 1.
double soft_value(const GmmSpec& g, const LinearReward& r, double t,
                  const Eigen::VectorXd& z);
Eigen::VectorXd soft_value_grad(const GmmSpec& g, const LinearReward& r, double t,
                                const Eigen::VectorXd& z);

// Tempered variants with reward lambda * r (soft value of the scaled reward).
double tempered_soft_value(const GmmSpec& g, const LinearReward& r, double lambda,
                           double t, const Eigen::VectorXd& z);

// Var[r(z_0) | z_t = z], the second cumulant of the posterior reward.
double posterior_reward_variance(const GmmSpec& g, const LinearReward& r, double t,
                                 const Eigen::VectorXd& z);

// Exponentially tilted distribution p*(z) ∝ p(z) exp(r(z)): component k gets
// weight ∝ w_k exp(a·mu_k + a'Sigma_k a / 2), mean mu_k + Sigma_k a,
// unchanged covariance. Exact for linear rewards.
GmmSpec tilted(const GmmSpec& g, const LinearReward& r);
GmmSpec tilted(const GmmSpec& g, const LinearReward& r, double lambda);

Eigen::VectorXd sample(const GmmSpec& g, Rng& rng);
Eigen::MatrixXd sample(const GmmSpec& g, int n, Rng& rng);

// Exact posterior draw z_0 ~ p(z_0 | z_t = z): responsibilities pick the
// component, then the component-conditional Gaussian. t < 1.
Eigen::VectorXd sample_posterior(const GmmSpec& g, double t,
                                 const Eigen::VectorXd& z, Rng& rng);

struct McEstimate {
  double mean = 0.0;
  double stderr_of_mean = 0.0;
  int n = 0;
};

// Brute-force value oracle, analytic mode: averages the reward over n exact
// posterior draws. Deterministic given the rng state.
McEstimate mc_value_oracle(const GmmSpec& g, const LinearReward& r, double t,
                           const Eigen::VectorXd& z, int n_rollouts, Rng& rng);

// Model mode: averages an arbitrary reward over rollouts produced by the
// supplied kernel (e.g. SDE denoising from (z, t) to a clean sample).
using RolloutFn =
    std::function<Eigen::VectorXd(const Eigen::VectorXd& z, double t, Rng& rng)>;
McEstimate mc_value_oracle(const RolloutFn& rollout,
                           const std::function<double(const Eigen::VectorXd&)>& reward,
                           double t, const Eigen::VectorXd& z, int n_rollouts,
                           Rng& rng);

}  // namespace valstitch::gmm

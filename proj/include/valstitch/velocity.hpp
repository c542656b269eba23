#pragma once

#include <Eigen/Dense>

#include <functional>
#include <vector>

#include "valstitch/gmm.hpp"
#include "valstitch/mlp.hpp"
#include "valstitch/rng.hpp"

// The flow generator: conditional flow-matching training, ODE/SDE sampling
// over t: 1 -> 0, and truncated-feature extraction for stitching.
namespace valstitch::gen {

// Sinusoidal features of t, 8 geometrically spaced frequencies, sin and cos.
constexpr int kTimeEmbedDim = 16;
Eigen::VectorXd time_embedding(double t);

// Velocity field on a batch at a common time t (z is features x batch).
using VelocityFn =
    std::function<Eigen::MatrixXd(const Eigen::MatrixXd& z, double t)>;

struct VelocityModel {
  nn::Mlp mlp;  // input: z concatenated with the time embedding; output: R^d
  int data_dim = 0;

  Eigen::MatrixXd velocity(const Eigen::MatrixXd& z, double t) const;
  Eigen::MatrixXd velocity(const Eigen::MatrixXd& z, const Eigen::VectorXd& ts) const;
  Eigen::VectorXd velocity(const Eigen::VectorXd& z, double t) const;

  // Post-activation hidden state after layer i, time embedding included in
  // the input. 1 <= i <= depth.
  Eigen::MatrixXd features(const Eigen::MatrixXd& z, double t, int i) const;
  Eigen::MatrixXd features(const Eigen::MatrixXd& z, const Eigen::VectorXd& ts,
                           int i) const;

  VelocityFn as_fn() const;
};

// Default architecture: widths [d+16, 128, 128, 128, d], SiLU hidden layers.
// Depth 4 leaves truncation candidates i in {1, 2, 3}.
VelocityModel make_velocity_model(int data_dim, Rng& rng,
                                  const std::vector<int>& hidden = {128, 128, 128});

// Analytic marginal velocity of a GMM, u = -z/(1-t) - (t/(1-t)) score. Lets
// every downstream method be exercised free of learned-model error.
VelocityFn oracle_velocity(const gmm::GmmSpec& g);

// Tweedie denoiser D = z - t u.
Eigen::VectorXd tweedie_denoise(const VelocityFn& u, const Eigen::VectorXd& z, double t);
Eigen::MatrixXd tweedie_denoise(const VelocityFn& u, const Eigen::MatrixXd& z, double t);

enum class SamplerMode { Ode, Sde };

struct SamplerConfig {
  int n_steps = 64;
  SamplerMode mode = SamplerMode::Sde;
  std::uint64_t seed = 0;
};

// Uniform grid 1 = t_K > ... > t_0 = 0. The first step evaluates the drift at
// the left endpoint t_{K-1} (never at the singular t = 1); the SDE noise
// scale nu_t^2 is evaluated at each step's lower time.
Eigen::VectorXd time_grid(int n_steps);

struct SampleResult {
  Eigen::MatrixXd samples;                   // d x n, terminal states
  std::vector<Eigen::MatrixXd> trajectory;   // grid-indexed states, [0] at t=1
  Eigen::VectorXd grid;                      // descending times, size n_steps+1
};

SampleResult sample(const VelocityFn& u, int dim, const SamplerConfig& config,
                    int n_samples, Rng& rng);

// Extra drift added on top of the standard SDE drift (e.g. value guidance),
// evaluated at the same time as the drift itself.
using DriftHook =
    std::function<Eigen::MatrixXd(const Eigen::MatrixXd& z, double t_eval)>;

// A single SDE step from (z, t_hi) to t_lo. first_step selects the left
// endpoint convention for the drift time. Shared by the sampler, guided
// sampling and particle steering.
Eigen::MatrixXd sde_step(const VelocityFn& u, const Eigen::MatrixXd& z, double t_hi,
                         double t_lo, bool first_step, Rng& rng,
                         const DriftHook* extra_drift = nullptr);

// SDE rollout from an intermediate state (z, t_start) down to t = 0 on the
// remaining portion of an n_steps grid (used by the MC value estimator).
Eigen::VectorXd rollout_to_clean(const VelocityFn& u, const Eigen::VectorXd& z,
                                 double t_start, int n_steps, Rng& rng);

struct FmTrainConfig {
  int steps = 20000;
  int batch = 256;
  double lr = 1e-3;
  std::uint64_t seed = 1;
};

struct TrainHistory {
  std::vector<double> loss;
};

// Conditional flow matching: regress u_theta(z_t, t) onto eps - z_0 with
// t ~ U[0,1]. Throws on divergence (non-finite loss).
TrainHistory train_fm(VelocityModel& model, const gmm::GmmSpec& data,
                      const FmTrainConfig& config);

void save_velocity_model(const VelocityModel& model, const std::string& path);
VelocityModel load_velocity_model(const std::string& path);

}  // namespace valstitch::gen

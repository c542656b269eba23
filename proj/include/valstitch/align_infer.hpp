#pragma once

#include <Eigen/Dense>

#include <functional>
#include <vector>

#include "valstitch/stitch.hpp"
#include "valstitch/velocity.hpp"

// Inference-time alignment: value-gradient guidance, best-of-N, and particle
// steering with per-particle proposal scaling, all parametric over the value
// estimator.
namespace valstitch::steer {

struct CostReport {
  double full_model_evals = 0.0;
  double prefix_evals = 0.0;
  double estimator_evals = 0.0;
  double decoder_evals = 0.0;
  double estimator_layer_evals = 0.0;
  double estimator_flops = 0.0;

  void charge_estimator(const stitch::EvalCost& per_eval, double count = 1.0);
};

struct GuidanceConfig {
  double scale = 1.0;  // c >= 0; multiplies the schedule's guidance coefficient
  gen::SamplerConfig sampler;
};

// Euler-Maruyama of the tilted SDE: the standard sampling drift plus
// c * guidance_coeff(t) * grad V(z, t). With c = 0 this reproduces the plain
// sampler bit-exactly under the same rng stream.
gen::SampleResult guided_sample(const gen::VelocityFn& u,
                                const stitch::ValueEstimator& estimator, int dim,
                                const GuidanceConfig& config, int n, Rng& rng,
                                CostReport* cost = nullptr);

struct BestOfNResult {
  Eigen::VectorXd best;
  double best_reward = 0.0;
  std::vector<double> all_rewards;
};

BestOfNResult best_of_n(const gen::VelocityFn& u, int dim,
                        const std::function<double(const Eigen::VectorXd&)>& reward,
                        int n, const gen::SamplerConfig& sampler, Rng& rng);

struct FkConfig {
  int n_particles = 4;
  int m_proposals = 1;
  std::vector<int> resample_steps;  // step indices k in 1..n_steps (k counts down)
  std::vector<int> proposal_steps;  // steps where each particle draws M proposals
  double temperature = 1.0;
  gen::SamplerConfig sampler;
  std::uint64_t seed = 0;
};

// Defaults mirroring the reference setup: resampling every 4th step inside
// the middle 60% of the grid, proposal scaling at every step in the first
// (high-noise) 40%.
FkConfig default_fk_config(int n_steps, int n_particles, int m_proposals,
                           std::uint64_t seed);

struct FkResult {
  Eigen::MatrixXd particles;  // d x N terminal states
  Eigen::VectorXd last_values;
  // One row per resampling event: ancestor index per particle.
  std::vector<std::vector<int>> ancestry;
  int degenerate_fallbacks = 0;
  CostReport cost;
};

FkResult fk_steer(const gen::VelocityFn& u, const stitch::ValueEstimator& estimator,
                  int dim, const FkConfig& config);

// Multinomial resampling over softmax-normalized log potentials. Falls back
// to uniform (and reports it) when every potential underflows.
std::vector<int> resample_multinomial(const Eigen::VectorXd& log_potentials,
                                      double temperature, Rng& rng,
                                      bool* degenerate = nullptr);

// Static accounting of a steering run: model, estimator and decoder
// evaluation counts implied by the configuration (no sampling performed).
CostReport compute_budget(const FkConfig& config,
                          const stitch::ValueEstimator& estimator);

}  // namespace valstitch::steer

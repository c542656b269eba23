#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "valstitch/gmm.hpp"
#include "valstitch/reward_model.hpp"
#include "valstitch/velocity.hpp"

// Interface search with closed-form least squares, the stitching layer,
// value regression on noisy latents, and the unified value-estimator
// interface (stitched / tweedie / monte-carlo / analytic).
namespace valstitch::stitch {

// Probe triples (z_0, t, eps) with t ~ U[0,1]; z_t = (1-t) z_0 + t eps.
struct ProbeSet {
  Eigen::MatrixXd z0;   // d x N
  Eigen::VectorXd ts;   // N
  Eigen::MatrixXd eps;  // d x N

  int size() const { return static_cast<int>(ts.size()); }
  Eigen::MatrixXd zt() const;
};

ProbeSet make_probe_set(const gmm::GmmSpec& data, int n, Rng& rng);

struct StitchInterface {
  int i = 0;  // generator truncation index
  int j = 0;  // reward slice index
  Eigen::MatrixXd w;  // reward-feature dim x generator-feature dim
  double fit_loss = 0.0;  // mean squared residual per probe
};

// Closed-form solve of min_W |W F - G|_F^2 over cached feature columns, with
// a ridge floor of 1e-8 on the normal equations. Throws on a rank-0 probe
// matrix.
StitchInterface fit_interface_matrices(const Eigen::MatrixXd& f,
                                       const Eigen::MatrixXd& g, int i, int j);

StitchInterface fit_interface(const gen::VelocityModel& generator,
                              const rew::RewardModel& reward, int i, int j,
                              const ProbeSet& probes);

struct SearchResult {
  std::vector<StitchInterface> ranked;  // ascending fit loss
  std::vector<std::pair<int, int>> skipped;  // rank-degenerate pairs

  const StitchInterface& best() const { return ranked.front(); }
};

// Feature providers keyed by layer index; lets tests plant synthetic feature
// caches and lets the real search cache per-index features once.
using FeatureFn = std::function<Eigen::MatrixXd(int)>;

SearchResult search_interfaces(const FeatureFn& gen_features,
                               const std::vector<int>& i_range,
                               const FeatureFn& rew_features,
                               const std::vector<int>& j_range);

SearchResult search_interfaces(const gen::VelocityModel& generator,
                               const rew::RewardModel& reward,
                               const ProbeSet& probes,
                               const std::vector<int>& i_range,
                               const std::vector<int>& j_range);

// Affine map F initialized from W*, plus a two-layer bottleneck residual
// (ratio 1:8) whose final layer is zero-initialized, so the layer computes
// exactly F(h) at initialization.
struct StitchLayer {
  Eigen::MatrixXd f_w;
  Eigen::VectorXd f_b;
  Eigen::MatrixXd g1_w;
  Eigen::VectorXd g1_b;
  Eigen::MatrixXd g2_w;
  Eigen::VectorXd g2_b;

  int in_dim() const { return static_cast<int>(f_w.cols()); }
  int out_dim() const { return static_cast<int>(f_w.rows()); }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& h) const;

  struct Tape {
    Eigen::MatrixXd h, y, s0, a1, s1;
  };
  Eigen::MatrixXd forward(const Eigen::MatrixXd& h, Tape& tape) const;

  struct Grads {
    Eigen::MatrixXd f_w, g1_w, g2_w;
    Eigen::VectorXd f_b, g1_b, g2_b;
  };
  Grads zero_grads() const;
  // Returns dL/dh.
  Eigen::MatrixXd backward(const Tape& tape, const Eigen::MatrixXd& dout,
                           Grads& grads) const;

  Eigen::Index param_count() const;
  Eigen::VectorXd flatten_params() const;
  void set_params(const Eigen::VectorXd& flat);
  Eigen::VectorXd flatten_grads(const Grads& g) const;
};

StitchLayer make_stitch_layer(const StitchInterface& iface, Rng& rng,
                              int bottleneck_ratio = 8);

// Frozen generator prefix + stitching layer + reward suffix: a value model
// that reads noisy latents directly.
struct StitchedValueModel {
  gen::VelocityModel generator;  // prefix donor, frozen
  int i = 0;
  StitchLayer layer;
  rew::RewardModel reward_tail;  // learned net; layers j..depth are the tail
  int j = 0;

  double value(const Eigen::VectorXd& z, double t) const;
  Eigen::RowVectorXd value_batch(const Eigen::MatrixXd& z, double t) const;
  Eigen::RowVectorXd value_batch(const Eigen::MatrixXd& z,
                                 const Eigen::VectorXd& ts) const;
  Eigen::VectorXd grad_value(const Eigen::VectorXd& z, double t) const;
};

StitchedValueModel assemble_stitched_model(const gen::VelocityModel& generator,
                                           const rew::RewardModel& reward,
                                           const StitchInterface& iface, Rng& rng);

struct StitchTrainConfig {
  int steps = 6000;
  int batch = 256;
  double lr = 1e-3;
  double stitch_lr_multiplier = 5.0;
  std::uint64_t seed = 3;
};

struct StitchTrainHistory {
  std::vector<double> loss;
};

// Stage 2: regress the model output at z_t onto the frozen teacher's reward
// at z_0, training only the stitch layer and the reward suffix. Noise levels
// are drawn from the center-biased Beta(2,2). The generator prefix is
// untouched (bit-identical parameters before and after).
StitchTrainHistory train_stitch(StitchedValueModel& model, const gmm::GmmSpec& data,
                                const rew::RewardModel& frozen_teacher,
                                const StitchTrainConfig& config);

// ---------------------------------------------------------------------------
// Unified value-estimator interface.

struct EvalCost {
  double full_model_evals = 0.0;
  double prefix_evals = 0.0;
  double decoder_evals = 0.0;
  // Cost in network-layer applications (generator layers used + reward
  // layers used); the lightweight stitching adapter shows up only in flops.
  double layer_evals = 0.0;
  double flops = 0.0;  // multiply count through the layers actually used
};

class ValueEstimator {
 public:
  virtual ~ValueEstimator() = default;
  virtual double value(const Eigen::VectorXd& z, double t) const = 0;
  virtual Eigen::VectorXd grad_value(const Eigen::VectorXd& z, double t) const;
  virtual bool differentiable() const = 0;
  virtual std::string name() const = 0;
  // Per-evaluation cost charge at noise level t.
  virtual EvalCost cost_at(double t) const = 0;
};

// Exact reference estimator; mode selects the regressed (standard) value or
// the soft value used by exact tilted sampling.
enum class AnalyticMode { Standard, Soft };

class AnalyticEstimator : public ValueEstimator {
 public:
  AnalyticEstimator(gmm::GmmSpec g, gmm::LinearReward r,
                    AnalyticMode mode = AnalyticMode::Standard);
  double value(const Eigen::VectorXd& z, double t) const override;
  Eigen::VectorXd grad_value(const Eigen::VectorXd& z, double t) const override;
  bool differentiable() const override { return true; }
  std::string name() const override;
  EvalCost cost_at(double t) const override;

 private:
  gmm::GmmSpec g_;
  gmm::LinearReward r_;
  AnalyticMode mode_;
};

// r applied to the one-step denoised estimate D = z - t u.
class TweedieEstimator : public ValueEstimator {
 public:
  // Learned-generator variant.
  TweedieEstimator(gen::VelocityModel model, rew::RewardModel reward);
  // Oracle variant backed by the analytic posterior mean.
  TweedieEstimator(gmm::GmmSpec g, rew::RewardModel reward);
  double value(const Eigen::VectorXd& z, double t) const override;
  Eigen::VectorXd grad_value(const Eigen::VectorXd& z, double t) const override;
  bool differentiable() const override { return true; }
  std::string name() const override { return "tweedie"; }
  EvalCost cost_at(double t) const override;

 private:
  std::optional<gen::VelocityModel> model_;
  std::optional<gmm::GmmSpec> g_;
  rew::RewardModel reward_;
};

// Averages the reward over SDE denoising rollouts from (z, t). Deterministic:
// the rollout noise stream is derived from the seed and the evaluation point,
// so concurrent calls agree with any execution order. Not differentiable.
class McEstimator : public ValueEstimator {
 public:
  McEstimator(gen::VelocityFn velocity, rew::RewardModel reward, int n_rollouts,
              int n_steps, std::uint64_t seed, bool soft = false);
  double value(const Eigen::VectorXd& z, double t) const override;
  double value_with_stderr(const Eigen::VectorXd& z, double t,
                           double* stderr_out) const;
  bool differentiable() const override { return false; }
  std::string name() const override { return soft_ ? "mc-soft" : "mc"; }
  EvalCost cost_at(double t) const override;

 private:
  gen::VelocityFn velocity_;
  rew::RewardModel reward_;
  int n_rollouts_;
  int n_steps_;
  std::uint64_t seed_;
  bool soft_;
};

class StitchEstimator : public ValueEstimator {
 public:
  explicit StitchEstimator(StitchedValueModel model);
  double value(const Eigen::VectorXd& z, double t) const override;
  Eigen::VectorXd grad_value(const Eigen::VectorXd& z, double t) const override;
  bool differentiable() const override { return true; }
  std::string name() const override { return "stitch"; }
  EvalCost cost_at(double t) const override;
  const StitchedValueModel& model() const { return model_; }

 private:
  StitchedValueModel model_;
};

double mlp_flops(const nn::Mlp& mlp, int begin, int end);

void save_stitched(const StitchedValueModel& model, const std::string& path);
StitchedValueModel load_stitched(const std::string& path);

}  // namespace valstitch::stitch

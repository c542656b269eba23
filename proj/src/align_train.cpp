#include "valstitch/align_train.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "valstitch/schedule.hpp"

namespace valstitch::tune {

namespace {

// Drift of the sampling SDE written as cu * u + cz * z. nu^2 is evaluated at
// the step's lower time, the velocity at t_eval.
struct DriftCoeffs {
  double cu = 1.0;
  double cz = 0.0;
};

DriftCoeffs drift_coeffs(double t_eval, double t_lo) {
  const double kappa = 0.5 * schedule::sde_diffusion_sq(t_lo);
  DriftCoeffs c;
  if (t_eval > 0.0) {
    c.cu = 1.0 + kappa * (1.0 - t_eval) / t_eval;
    c.cz = kappa / t_eval;
  }
  return c;
}

struct RolloutStep {
  nn::Tape tape;       // forward tape of the trainable net at this step
  Eigen::MatrixXd u;   // velocity outputs, d x B
  double dt = 0.0;
  DriftCoeffs coeffs;
};

Eigen::MatrixXd embed_batch(const Eigen::MatrixXd& z, double t) {
  Eigen::MatrixXd input(z.rows() + gen::kTimeEmbedDim, z.cols());
  input.topRows(z.rows()) = z;
  input.bottomRows(gen::kTimeEmbedDim) = gen::time_embedding(t).replicate(1, z.cols());
  return input;
}

}  // namespace

DraftTrainer::DraftTrainer(gen::VelocityModel model, DraftConfig config)
    : model_(std::move(model)), init_model_(model_), cfg_(config) {
  if (cfg_.rollout_steps < 2)
    throw std::invalid_argument("DraftTrainer: rollout_steps must be >= 2");
  if (cfg_.k_window < 1 || cfg_.k_window > cfg_.rollout_steps)
    throw std::invalid_argument("DraftTrainer: k_window must lie in [1, steps]");
  if (cfg_.stop_lo < 1 || cfg_.stop_hi > cfg_.rollout_steps ||
      cfg_.stop_lo > cfg_.stop_hi)
    throw std::invalid_argument("DraftTrainer: bad stop window");
  if (cfg_.reg_weight < 0.0)
    throw std::invalid_argument("DraftTrainer: negative regularizer weight");
  params_ = nn::flatten_params(model_.mlp);
  opt_.lr = cfg_.lr;
  opt_.init(params_.size());
}

Eigen::VectorXd DraftTrainer::gradient_terminal(const rew::RewardModel& reward,
                                                Rng& rng, double* loss_out) {
  return gradient_impl(&reward, nullptr, rng, loss_out);
}

Eigen::VectorXd DraftTrainer::gradient_value(const stitch::ValueEstimator& estimator,
                                             Rng& rng, double* loss_out) {
  if (!estimator.differentiable())
    throw std::logic_error("DraftTrainer: value mode needs a differentiable estimator");
  return gradient_impl(nullptr, &estimator, rng, loss_out);
}

Eigen::VectorXd DraftTrainer::gradient_impl(const rew::RewardModel* reward,
                                            const stitch::ValueEstimator* estimator,
                                            Rng& rng, double* loss_out) {
  const int B = cfg_.batch;
  const int S = cfg_.rollout_steps;
  const int d = model_.data_dim;
  Eigen::VectorXd grid = gen::time_grid(S);

  // Stop index: terminal mode rolls to t = 0; value mode halts inside the
  // stop window.
  int stop_idx = S;
  if (estimator) {
    stop_idx = cfg_.stop_lo +
               static_cast<int>(rng.uniform_index(cfg_.stop_hi - cfg_.stop_lo + 1));
  }

  Eigen::MatrixXd z = rng.normal_mat(d, B);
  std::vector<RolloutStep> steps(stop_idx);
  for (int s = 1; s <= stop_idx; ++s) {
    const double t_hi = grid[s - 1], t_lo = grid[s];
    const double t_eval = s == 1 ? t_lo : t_hi;
    RolloutStep& st = steps[s - 1];
    st.dt = t_lo - t_hi;
    st.coeffs = drift_coeffs(t_eval, t_lo);
    st.u = nn::forward(model_.mlp, embed_batch(z, t_eval), &st.tape);
    rollout_full_evals_ += B;
    if (!st.u.allFinite())
      throw std::runtime_error("draft rollout: non-finite velocity at step " +
                               std::to_string(s));
    Eigen::MatrixXd next =
        z + st.dt * (st.coeffs.cu * st.u + st.coeffs.cz * z);
    const double nu2 = schedule::sde_diffusion_sq(t_lo);
    if (nu2 > 0.0) next += std::sqrt(nu2 * (-st.dt)) * rng.normal_mat(d, B);
    z = next;
  }
  const double t_stop = grid[stop_idx];

  // Loss = -mean signal + lambda * R. Adjoint of the final state:
  Eigen::MatrixXd g(d, B);
  double mean_signal = 0.0;
  if (reward) {
    for (int b = 0; b < B; ++b) {
      mean_signal += rew::reward(*reward, z.col(b));
      g.col(b) = -rew::reward_grad(*reward, z.col(b)) / B;
    }
  } else {
    const stitch::EvalCost per_eval = estimator->cost_at(t_stop);
    for (int b = 0; b < B; ++b) {
      mean_signal += estimator->value(z.col(b), t_stop);
      g.col(b) = -estimator->grad_value(z.col(b), t_stop) / B;
    }
    estimator_prefix_evals_ += 2.0 * B * per_eval.prefix_evals;
  }
  mean_signal /= B;

  // Backward window: terminal mode truncates to the last K steps (earlier
  // steps detached); value mode backpropagates through the rolled-out chain.
  const int window = reward ? cfg_.k_window : stop_idx;
  nn::Gradients grads = nn::zero_gradients(model_.mlp);
  for (int s = stop_idx; s > stop_idx - window; --s) {
    RolloutStep& st = steps[s - 1];
    Eigen::MatrixXd upstream = st.dt * st.coeffs.cu * g;
    Eigen::MatrixXd dinput = nn::backward(model_.mlp, st.tape, upstream, &grads);
    g = g + st.dt * st.coeffs.cz * g + dinput.topRows(d);
  }

  double reg = 0.0;
  if (cfg_.reg_weight > 0.0) {
    // Output regularizer against the initial model, on the rollout batch
    // (states detached).
    const double scale = 1.0 / (double(B) * stop_idx);
    for (int s = 1; s <= stop_idx; ++s) {
      RolloutStep& st = steps[s - 1];
      Eigen::MatrixXd u0 = nn::forward(init_model_.mlp, st.tape.inputs[0]);
      Eigen::MatrixXd diff = st.u - u0;
      reg += scale * diff.squaredNorm();
      nn::backward(model_.mlp, st.tape,
                   (2.0 * cfg_.reg_weight * scale) * diff, &grads);
    }
  }

  Eigen::VectorXd flat = nn::flatten_gradients(model_.mlp, grads);
  if (!flat.allFinite())
    throw std::runtime_error("draft gradient: non-finite gradient");
  if (loss_out) *loss_out = -mean_signal + cfg_.reg_weight * reg;
  return flat;
}

double DraftTrainer::step_terminal(const rew::RewardModel& reward, Rng& rng) {
  double loss = 0.0;
  Eigen::VectorXd grad = gradient_impl(&reward, nullptr, rng, &loss);
  opt_.step(params_, grad);
  nn::set_params(model_.mlp, params_);
  return loss;
}

double DraftTrainer::step_value(const stitch::ValueEstimator& estimator, Rng& rng) {
  if (!estimator.differentiable())
    throw std::logic_error("DraftTrainer: value mode needs a differentiable estimator");
  double loss = 0.0;
  Eigen::VectorXd grad = gradient_impl(nullptr, &estimator, rng, &loss);
  opt_.step(params_, grad);
  nn::set_params(model_.mlp, params_);
  return loss;
}

Eigen::VectorXd nft_normalize_rewards(const Eigen::VectorXd& raw, double z_floor) {
  if (raw.size() < 2)
    throw std::invalid_argument("nft_normalize_rewards: group size must be >= 2");
  const double mean = raw.mean();
  Eigen::VectorXd centered = raw.array() - mean;
  const double z = std::max(std::sqrt(centered.squaredNorm() / raw.size()), z_floor);
  Eigen::VectorXd out(raw.size());
  for (Eigen::Index i = 0; i < raw.size(); ++i) {
    const double clipped = std::clamp(centered[i] / z, -1.0, 1.0);
    out[i] = 0.5 + 0.5 * clipped;
  }
  return out;
}

NftTrainer::NftTrainer(gen::VelocityModel model, NftConfig config)
    : model_(std::move(model)), old_model_(model_), cfg_(config) {
  if (cfg_.group < 2)
    throw std::invalid_argument("NftTrainer: group size must be >= 2");
  if (!(cfg_.beta > 0.0 && cfg_.beta <= 1.0))
    throw std::invalid_argument("NftTrainer: beta must lie in (0, 1]");
  if (!(cfg_.rho >= 0.0 && cfg_.rho <= 1.0))
    throw std::invalid_argument("NftTrainer: rho must lie in [0, 1]");
  if (cfg_.stop_lo < 1 || cfg_.stop_hi > cfg_.rollout_steps ||
      cfg_.stop_lo > cfg_.stop_hi)
    throw std::invalid_argument("NftTrainer: bad stop window");
  params_ = nn::flatten_params(model_.mlp);
  opt_.lr = cfg_.lr;
  opt_.init(params_.size());
}

double NftTrainer::step_terminal(
    const std::function<double(const Eigen::VectorXd&)>& reward, Rng& rng) {
  return step_impl(&reward, nullptr, rng);
}

double NftTrainer::step_value(const stitch::ValueEstimator& estimator, Rng& rng) {
  return step_impl(nullptr, &estimator, rng);
}

double NftTrainer::step_impl(
    const std::function<double(const Eigen::VectorXd&)>* reward,
    const stitch::ValueEstimator* estimator, Rng& rng) {
  const int B = cfg_.group;
  const int S = cfg_.rollout_steps;
  const int d = model_.data_dim;
  Eigen::VectorXd grid = gen::time_grid(S);

  // Per-rollout stop indices: terminal anchors at the clean end, the value
  // variant inside the stop window.
  std::vector<int> stop_idx(B, S);
  if (estimator) {
    for (int b = 0; b < B; ++b)
      stop_idx[b] = cfg_.stop_lo + static_cast<int>(rng.uniform_index(
                                       cfg_.stop_hi - cfg_.stop_lo + 1));
  }

  // Group rollout from the frozen data-collection policy; columns retire at
  // their own stop step so the eval counter reflects per-chain cost.
  gen::VelocityFn old_fn = old_model_.as_fn();
  Eigen::MatrixXd anchors(d, B);
  Eigen::VectorXd anchor_times(B);
  {
    std::vector<int> active(B);
    for (int b = 0; b < B; ++b) active[b] = b;
    Eigen::MatrixXd z = rng.normal_mat(d, B);
    for (int s = 1; s <= S && !active.empty(); ++s) {
      Eigen::MatrixXd zs(d, active.size());
      for (size_t c = 0; c < active.size(); ++c) zs.col(c) = z.col(active[c]);
      zs = gen::sde_step(old_fn, zs, grid[s - 1], grid[s], s == 1, rng);
      rollout_full_evals_ += double(active.size());
      std::vector<int> still;
      for (size_t c = 0; c < active.size(); ++c) {
        const int b = active[c];
        z.col(b) = zs.col(c);
        if (stop_idx[b] == s) {
          anchors.col(b) = zs.col(c);
          anchor_times[b] = grid[s];
        } else {
          still.push_back(b);
        }
      }
      active.swap(still);
    }
  }

  // Scalar signal per anchor, mapped to optimality probabilities.
  Eigen::VectorXd raw(B);
  for (int b = 0; b < B; ++b) {
    raw[b] = reward ? (*reward)(anchors.col(b))
                    : estimator->value(anchors.col(b), anchor_times[b]);
    if (estimator)
      estimator_prefix_evals_ += estimator->cost_at(anchor_times[b]).prefix_evals;
  }
  Eigen::VectorXd prob = nft_normalize_rewards(raw, cfg_.z_floor);

  // Bridge regression batch: for each anchor draw a noisier time and state.
  Eigen::VectorXd ts(B);
  Eigen::MatrixXd zt(d, B);
  Eigen::MatrixXd target(d, B);
  for (int b = 0; b < B; ++b) {
    const double tau = anchor_times[b];
    const double t = tau + (1.0 - tau) * rng.uniform();
    ts[b] = t;
    auto bc = schedule::bridge(t, tau);
    Eigen::VectorXd eps = rng.normal_vec(d);
    zt.col(b) = bc.alpha_bar * anchors.col(b) + bc.sigma_bar * eps;
    target.col(b) = bc.d_alpha_bar * anchors.col(b) + bc.d_sigma_bar * eps;
  }

  Eigen::MatrixXd input(d + gen::kTimeEmbedDim, B);
  input.topRows(d) = zt;
  for (int b = 0; b < B; ++b)
    input.bottomRows(gen::kTimeEmbedDim).col(b) = gen::time_embedding(ts[b]);

  nn::Tape tape;
  Eigen::MatrixXd u_cur = nn::forward(model_.mlp, input, &tape);
  Eigen::MatrixXd u_old = nn::forward(old_model_.mlp, input);
  const double beta = cfg_.beta;
  Eigen::MatrixXd u_plus = (1.0 - beta) * u_old + beta * u_cur;
  Eigen::MatrixXd u_minus = (1.0 + beta) * u_old - beta * u_cur;

  double loss = 0.0;
  Eigen::MatrixXd dloss_du(d, B);
  for (int b = 0; b < B; ++b) {
    const double r = prob[b];
    Eigen::VectorXd ep = u_plus.col(b) - target.col(b);
    Eigen::VectorXd em = u_minus.col(b) - target.col(b);
    loss += (r * ep.squaredNorm() + (1.0 - r) * em.squaredNorm()) / B;
    dloss_du.col(b) = 2.0 * beta * (r * ep - (1.0 - r) * em) / B;
  }
  if (!std::isfinite(loss))
    throw std::runtime_error("nft step: training failure (non-finite loss)");

  nn::Gradients grads = nn::zero_gradients(model_.mlp);
  nn::backward(model_.mlp, tape, dloss_du, &grads);
  opt_.step(params_, nn::flatten_gradients(model_.mlp, grads));
  nn::set_params(model_.mlp, params_);

  // EMA update of the frozen data-collection policy.
  Eigen::VectorXd old_flat = nn::flatten_params(old_model_.mlp);
  old_flat = cfg_.rho * old_flat + (1.0 - cfg_.rho) * params_;
  nn::set_params(old_model_.mlp, old_flat);
  return loss;
}

std::pair<int, int> stop_window_preset(const std::string& name, int n_steps) {
  // Windows sit inside their fractional coverage: lo = ceil, hi = floor.
  auto window = [n_steps](double lo_frac, double hi_frac) -> std::pair<int, int> {
    int lo = std::clamp(int(std::ceil(lo_frac * n_steps)), 1, n_steps);
    int hi = std::clamp(int(std::floor(hi_frac * n_steps)), lo, n_steps);
    return {lo, hi};
  };
  if (name == "high") return window(0.08, 0.48);
  if (name == "tight-mid") return window(0.48, 0.68);
  if (name == "wide") return window(0.48, 1.0);
  if (name == "low") return window(0.8, 1.0);
  throw std::invalid_argument("stop_window_preset: unknown preset '" + name + "'");
}

KlRlReport kl_rl_equivalence_check(const gmm::GmmSpec& g, const gmm::LinearReward& r) {
  if (g.dim() != 1)
    throw std::invalid_argument("kl_rl_equivalence_check: 1D scenarios only");

  // Integration bounds covering p and every candidate tilt.
  double lo = 1e300, hi = -1e300, sig = 0.0;
  for (int k = 0; k < g.components(); ++k) {
    const double mu = g.means[k][0];
    const double shift = g.covs[k](0, 0) * r.a[0];
    lo = std::min({lo, mu, mu + 2.2 * shift});
    hi = std::max({hi, mu, mu + 2.2 * shift});
    sig = std::max(sig, std::sqrt(g.covs[k](0, 0)));
  }
  lo -= 12.0 * sig;
  hi += 12.0 * sig;

  const int n = 8001;
  const double h = (hi - lo) / (n - 1);
  auto objective = [&](double lambda) {
    gmm::GmmSpec q = gmm::tilted(g, r, lambda);
    auto integrand = [&](double x) {
      Eigen::VectorXd xv(1);
      xv << x;
      const double lq = gmm::log_density(q, xv);
      const double lp = gmm::log_density(g, xv);
      const double qx = std::exp(lq);
      return qx == 0.0 ? 0.0 : qx * (r(xv) + lp - lq);
    };
    double s = integrand(lo) + integrand(hi);
    for (int i = 1; i < n - 1; ++i) s += (i % 2 ? 4.0 : 2.0) * integrand(lo + i * h);
    return s * h / 3.0;
  };

  KlRlReport rep;
  const double j1 = objective(1.0);
  // A flat objective (zero reward direction) shows no drop away from the
  // tilt family's base point.
  if (std::abs(j1 - objective(0.0)) < 1e-10 * std::max(1.0, std::abs(j1))) {
    rep.flat = true;
    rep.lambda_star = 1.0;
    rep.objective_at_star = j1;
    return rep;
  }

  // Golden-section maximization on [0, 2].
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = 0.0, b = 2.0;
  double c = b - gr * (b - a), dpt = a + gr * (b - a);
  double fc = objective(c), fd = objective(dpt);
  while (b - a > 1e-5) {
    if (fc > fd) {
      b = dpt;
      dpt = c;
      fd = fc;
      c = b - gr * (b - a);
      fc = objective(c);
    } else {
      a = c;
      c = dpt;
      fc = fd;
      dpt = a + gr * (b - a);
      fd = objective(dpt);
    }
  }
  rep.lambda_star = 0.5 * (a + b);
  rep.objective_at_star = objective(rep.lambda_star);
  return rep;
}

}  // namespace valstitch::tune

#include "valstitch/align_infer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <stdexcept>

#include "valstitch/schedule.hpp"

namespace valstitch::steer {

void CostReport::charge_estimator(const stitch::EvalCost& per_eval, double count) {
  estimator_evals += count;
  full_model_evals += per_eval.full_model_evals * count;
  prefix_evals += per_eval.prefix_evals * count;
  decoder_evals += per_eval.decoder_evals * count;
  estimator_layer_evals += per_eval.layer_evals * count;
  estimator_flops += per_eval.flops * count;
}

gen::SampleResult guided_sample(const gen::VelocityFn& u,
                                const stitch::ValueEstimator& estimator, int dim,
                                const GuidanceConfig& config, int n, Rng& rng,
                                CostReport* cost) {
  if (config.scale < 0.0)
    throw std::invalid_argument("guided_sample: guidance scale must be >= 0");
  if (config.scale > 0.0 && !estimator.differentiable())
    throw std::logic_error("guided_sample: estimator provides no gradient");

  CostReport local;
  gen::DriftHook hook = [&](const Eigen::MatrixXd& z, double t_eval) {
    Eigen::MatrixXd g(z.rows(), z.cols());
    for (Eigen::Index c = 0; c < z.cols(); ++c)
      g.col(c) = estimator.grad_value(z.col(c), t_eval);
    local.charge_estimator(estimator.cost_at(t_eval), double(z.cols()));
    const double coeff = config.scale * schedule::guidance_coeff(t_eval);
    return Eigen::MatrixXd(coeff * g);
  };

  gen::SampleResult res;
  res.grid = gen::time_grid(config.sampler.n_steps);
  Eigen::MatrixXd z = rng.normal_mat(dim, n);
  res.trajectory.push_back(z);
  const gen::DriftHook* hook_ptr = config.scale > 0.0 ? &hook : nullptr;
  for (int j = 0; j < config.sampler.n_steps; ++j) {
    z = gen::sde_step(u, z, res.grid[j], res.grid[j + 1], j == 0, rng, hook_ptr);
    local.full_model_evals += n;
    if (!z.allFinite())
      throw std::runtime_error("guided_sample: integration failure at step " +
                               std::to_string(j));
    res.trajectory.push_back(z);
  }
  res.samples = z;
  if (cost) *cost = local;
  return res;
}

BestOfNResult best_of_n(const gen::VelocityFn& u, int dim,
                        const std::function<double(const Eigen::VectorXd&)>& reward,
                        int n, const gen::SamplerConfig& sampler, Rng& rng) {
  if (n < 1) throw std::invalid_argument("best_of_n: n must be >= 1");
  gen::SampleResult res = gen::sample(u, dim, sampler, n, rng);
  BestOfNResult out;
  out.all_rewards.resize(n);
  int best = 0;
  for (int c = 0; c < n; ++c) {
    out.all_rewards[c] = reward(res.samples.col(c));
    if (out.all_rewards[c] > out.all_rewards[best]) best = c;
  }
  out.best = res.samples.col(best);
  out.best_reward = out.all_rewards[best];
  return out;
}

FkConfig default_fk_config(int n_steps, int n_particles, int m_proposals,
                           std::uint64_t seed) {
  FkConfig cfg;
  cfg.n_particles = n_particles;
  cfg.m_proposals = m_proposals;
  cfg.sampler.n_steps = n_steps;
  cfg.seed = seed;
  // proposal scaling at every step in the first 40% of the trajectory
  const int m_hi = static_cast<int>(std::floor(0.4 * n_steps));
  for (int s = 1; s <= m_hi; ++s) cfg.proposal_steps.push_back(s);
  // resampling every 4th step within the middle 60%
  const int lo = static_cast<int>(std::ceil(0.2 * n_steps));
  const int hi = static_cast<int>(std::floor(0.8 * n_steps));
  for (int s = std::max(lo, 1); s <= hi; ++s)
    if (s % 4 == 0) cfg.resample_steps.push_back(s);
  return cfg;
}

std::vector<int> resample_multinomial(const Eigen::VectorXd& log_potentials,
                                      double temperature, Rng& rng,
                                      bool* degenerate) {
  const int n = static_cast<int>(log_potentials.size());
  if (n < 1) throw std::invalid_argument("resample_multinomial: empty population");
  if (temperature <= 0.0)
    throw std::invalid_argument("resample_multinomial: temperature must be > 0");
  Eigen::VectorXd lp = log_potentials / temperature;
  const double mx = lp.maxCoeff();
  bool degen = !std::isfinite(mx);
  Eigen::VectorXd probs;
  if (degen) {
    probs = Eigen::VectorXd::Constant(n, 1.0 / n);
  } else {
    probs = (lp.array() - mx).exp();
    if (!probs.allFinite()) {
      degen = true;
      probs = Eigen::VectorXd::Constant(n, 1.0 / n);
    }
  }
  if (degenerate) *degenerate = degen;
  std::vector<int> ancestors(n);
  for (int i = 0; i < n; ++i) ancestors[i] = rng.categorical(probs);
  return ancestors;
}

namespace {

bool contains(const std::vector<int>& xs, int v) {
  return std::find(xs.begin(), xs.end(), v) != xs.end();
}

}  // namespace

FkResult fk_steer(const gen::VelocityFn& u, const stitch::ValueEstimator& estimator,
                  int dim, const FkConfig& config) {
  const int N = config.n_particles;
  const int M = config.m_proposals;
  const int K = config.sampler.n_steps;
  if (N < 1) throw std::invalid_argument("fk_steer: need at least one particle");
  if (M < 1 || M > 64)
    throw std::invalid_argument("fk_steer: proposal count must lie in [1, 64]");
  for (int s : config.resample_steps)
    if (s < 1 || s > K)
      throw std::invalid_argument("fk_steer: resample step outside the grid");
  for (int s : config.proposal_steps)
    if (s < 1 || s > K)
      throw std::invalid_argument("fk_steer: proposal step outside the grid");

  Eigen::VectorXd grid = gen::time_grid(K);
  Rng init_rng = Rng::stream(config.seed, "fk.init");
  Eigen::MatrixXd particles = init_rng.normal_mat(dim, N);

  FkResult res;
  Eigen::VectorXd last_values = Eigen::VectorXd::Zero(N);
  bool values_fresh = false;

  // Step s is the s-th transition, from grid[s-1] down to grid[s].
  for (int s = 1; s <= K; ++s) {
    const double t_hi = grid[s - 1];
    const double t_lo = grid[s];
    const bool first = (s == 1);
    const bool proposal_step = M > 1 && contains(config.proposal_steps, s);
    const bool fk_step = contains(config.resample_steps, s);

    // Shared drift: one velocity evaluation per particle; proposals differ
    // only in their injected noise.
    const double t_eval = first ? t_lo : t_hi;
    Eigen::MatrixXd vel = u(particles, t_eval);
    res.cost.full_model_evals += N;
    if (!vel.allFinite())
      throw std::runtime_error("fk_steer: non-finite velocity at step " +
                               std::to_string(s));
    const double nu2 = schedule::sde_diffusion_sq(t_lo);
    Eigen::MatrixXd drift;
    if (t_eval > 0.0) {
      Eigen::MatrixXd score = -((1.0 - t_eval) * vel + particles) / t_eval;
      drift = vel - 0.5 * nu2 * score;
    } else {
      drift = vel;
    }
    Eigen::MatrixXd stepped = particles + (t_lo - t_hi) * drift;
    const double noise_scale = nu2 > 0.0 ? std::sqrt(nu2 * (t_hi - t_lo)) : 0.0;

    Eigen::MatrixXd selected(dim, N);
    Eigen::VectorXd selected_values = Eigen::VectorXd::Zero(N);
    bool selected_fresh = false;

    for (int n = 0; n < N; ++n) {
      if (proposal_step) {
        double best_v = -std::numeric_limits<double>::infinity();
        Eigen::VectorXd best_z;
        for (int m = 0; m < M; ++m) {
          // Proposal streams are indexed independently of M, so runs that
          // differ only in M share their base noise.
          Rng noise = Rng::stream(config.seed, "fk.noise",
                                  ((std::uint64_t(s) * N + n) << 6) | m);
          Eigen::VectorXd prop =
              stepped.col(n) + noise_scale * noise.normal_vec(dim);
          const double v = estimator.value(prop, t_lo);
          res.cost.charge_estimator(estimator.cost_at(t_lo));
          if (v > best_v) {
            best_v = v;
            best_z = prop;
          }
        }
        selected.col(n) = best_z;
        selected_values[n] = best_v;
      } else {
        Rng noise =
            Rng::stream(config.seed, "fk.noise", (std::uint64_t(s) * N + n) << 6);
        selected.col(n) = stepped.col(n) + noise_scale * noise.normal_vec(dim);
      }
    }
    selected_fresh = proposal_step;

    if (fk_step) {
      if (!selected_fresh) {
        for (int n = 0; n < N; ++n) {
          selected_values[n] = estimator.value(selected.col(n), t_lo);
          res.cost.charge_estimator(estimator.cost_at(t_lo));
        }
        selected_fresh = true;
      }
      if (!values_fresh) {
        if (t_hi >= 1.0) {
          // V at t = 1 is particle-independent (the posterior is the prior),
          // so any common constant drops out of the softmax.
          last_values.setZero();
        } else {
          for (int n = 0; n < N; ++n) {
            last_values[n] = estimator.value(particles.col(n), t_hi);
            res.cost.charge_estimator(estimator.cost_at(t_hi));
          }
        }
      }
      // potential G = exp(V(new latent) - V(old latent)), each at its own time
      Eigen::VectorXd log_pot = selected_values - last_values;
      bool degen = false;
      Rng resample_rng = Rng::stream(config.seed, "fk.resample", s);
      std::vector<int> ancestors =
          resample_multinomial(log_pot, config.temperature, resample_rng, &degen);
      if (degen) {
        ++res.degenerate_fallbacks;
        std::cerr << "fk_steer: degenerate potentials at step " << s
                  << ", resampling uniformly\n";
      }
      res.ancestry.push_back(ancestors);
      Eigen::MatrixXd resampled(dim, N);
      Eigen::VectorXd resampled_values(N);
      for (int n = 0; n < N; ++n) {
        resampled.col(n) = selected.col(ancestors[n]);
        resampled_values[n] = selected_values[ancestors[n]];
      }
      particles = resampled;
      last_values = resampled_values;
      values_fresh = true;
    } else {
      particles = selected;
      last_values = selected_values;
      values_fresh = selected_fresh;
    }
  }

  if (!values_fresh) {
    // refresh terminal values so the reported per-particle values refer to
    // the states actually returned
    for (int n = 0; n < N; ++n) {
      last_values[n] = estimator.value(particles.col(n), 0.0);
      res.cost.charge_estimator(estimator.cost_at(0.0));
    }
  }
  res.particles = particles;
  res.last_values = last_values;
  return res;
}

CostReport compute_budget(const FkConfig& config,
                          const stitch::ValueEstimator& estimator) {
  const int N = config.n_particles;
  const int M = config.m_proposals;
  const int K = config.sampler.n_steps;
  Eigen::VectorXd grid = gen::time_grid(K);
  CostReport cost;
  cost.full_model_evals += double(N) * K;  // one shared drift eval per particle-step
  bool values_fresh = false;
  for (int s = 1; s <= K; ++s) {
    const double t_lo = grid[s];
    const double t_hi = grid[s - 1];
    const bool proposal_step = M > 1 && contains(config.proposal_steps, s);
    const bool fk_step = contains(config.resample_steps, s);
    bool selected_fresh = proposal_step;
    if (proposal_step)
      cost.charge_estimator(estimator.cost_at(t_lo), double(N) * M);
    if (fk_step) {
      if (!selected_fresh) cost.charge_estimator(estimator.cost_at(t_lo), N);
      if (!values_fresh && t_hi < 1.0) cost.charge_estimator(estimator.cost_at(t_hi), N);
      values_fresh = true;
    } else {
      values_fresh = selected_fresh;
    }
  }
  if (!values_fresh) cost.charge_estimator(estimator.cost_at(0.0), N);
  return cost;
}

}  // namespace valstitch::steer

#include "valstitch/velocity.hpp"

#include <cmath>
#include <stdexcept>

#include "valstitch/checkpoint.hpp"
#include "valstitch/schedule.hpp"

namespace valstitch::gen {

Eigen::VectorXd time_embedding(double t) {
  Eigen::VectorXd e(kTimeEmbedDim);
  double omega = M_PI;
  for (int k = 0; k < kTimeEmbedDim / 2; ++k) {
    e[k] = std::sin(omega * t);
    e[k + kTimeEmbedDim / 2] = std::cos(omega * t);
    omega *= 2.0;
  }
  return e;
}

namespace {

Eigen::MatrixXd with_embedding(const Eigen::MatrixXd& z, double t) {
  Eigen::MatrixXd input(z.rows() + kTimeEmbedDim, z.cols());
  input.topRows(z.rows()) = z;
  input.bottomRows(kTimeEmbedDim) = time_embedding(t).replicate(1, z.cols());
  return input;
}

Eigen::MatrixXd with_embedding(const Eigen::MatrixXd& z, const Eigen::VectorXd& ts) {
  if (ts.size() != z.cols())
    throw std::invalid_argument("velocity: one time per sample required");
  Eigen::MatrixXd input(z.rows() + kTimeEmbedDim, z.cols());
  input.topRows(z.rows()) = z;
  for (Eigen::Index i = 0; i < z.cols(); ++i)
    input.bottomRows(kTimeEmbedDim).col(i) = time_embedding(ts[i]);
  return input;
}

}  // namespace

Eigen::MatrixXd VelocityModel::velocity(const Eigen::MatrixXd& z, double t) const {
  return nn::forward(mlp, with_embedding(z, t));
}

Eigen::MatrixXd VelocityModel::velocity(const Eigen::MatrixXd& z,
                                        const Eigen::VectorXd& ts) const {
  return nn::forward(mlp, with_embedding(z, ts));
}

Eigen::VectorXd VelocityModel::velocity(const Eigen::VectorXd& z, double t) const {
  return nn::forward(mlp, with_embedding(z, t)).col(0);
}

Eigen::MatrixXd VelocityModel::features(const Eigen::MatrixXd& z, double t,
                                        int i) const {
  return nn::forward_truncated(mlp, with_embedding(z, t), i);
}

Eigen::MatrixXd VelocityModel::features(const Eigen::MatrixXd& z,
                                        const Eigen::VectorXd& ts, int i) const {
  return nn::forward_truncated(mlp, with_embedding(z, ts), i);
}

VelocityFn VelocityModel::as_fn() const {
  return [copy = *this](const Eigen::MatrixXd& z, double t) {
    return copy.velocity(z, t);
  };
}

VelocityModel make_velocity_model(int data_dim, Rng& rng,
                                  const std::vector<int>& hidden) {
  if (data_dim <= 0) throw std::invalid_argument("make_velocity_model: bad dim");
  std::vector<int> widths;
  widths.push_back(data_dim + kTimeEmbedDim);
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(data_dim);
  VelocityModel m;
  m.mlp = nn::make_mlp(widths, rng);
  m.data_dim = data_dim;
  return m;
}

VelocityFn oracle_velocity(const gmm::GmmSpec& g) {
  return [g](const Eigen::MatrixXd& z, double t) -> Eigen::MatrixXd {
    if (t >= 1.0)
      throw std::domain_error("oracle_velocity: singular at t = 1");
    Eigen::MatrixXd s = gmm::score_batch(g, t, z);
    return -(z + t * s) / (1.0 - t);
  };
}

Eigen::VectorXd tweedie_denoise(const VelocityFn& u, const Eigen::VectorXd& z,
                                double t) {
  return z - t * u(z, t);
}

Eigen::MatrixXd tweedie_denoise(const VelocityFn& u, const Eigen::MatrixXd& z,
                                double t) {
  return z - t * u(z, t);
}

Eigen::VectorXd time_grid(int n_steps) {
  if (n_steps < 2) throw std::invalid_argument("time_grid: n_steps must be >= 2");
  Eigen::VectorXd grid(n_steps + 1);
  for (int j = 0; j <= n_steps; ++j) grid[j] = 1.0 - double(j) / n_steps;
  grid[n_steps] = 0.0;
  return grid;
}

Eigen::MatrixXd sde_step(const VelocityFn& u, const Eigen::MatrixXd& z, double t_hi,
                         double t_lo, bool first_step, Rng& rng,
                         const DriftHook* extra_drift) {
  const double t_eval = first_step ? t_lo : t_hi;
  const double dt = t_lo - t_hi;  // negative: time runs 1 -> 0
  Eigen::MatrixXd vel = u(z, t_eval);
  if (!vel.allFinite())
    throw std::runtime_error("sde_step: velocity produced non-finite values");
  const double nu2 = schedule::sde_diffusion_sq(t_lo);
  Eigen::MatrixXd drift;
  if (t_eval > 0.0) {
    // score via the velocity reparametrization, s = -((1-t) u + z) / t
    Eigen::MatrixXd score = -((1.0 - t_eval) * vel + z) / t_eval;
    drift = vel - 0.5 * nu2 * score;
  } else {
    drift = vel;
  }
  if (extra_drift) drift += (*extra_drift)(z, t_eval);
  Eigen::MatrixXd out = z + dt * drift;
  if (nu2 > 0.0)
    out += std::sqrt(nu2 * (-dt)) * rng.normal_mat(z.rows(), z.cols());
  return out;
}

SampleResult sample(const VelocityFn& u, int dim, const SamplerConfig& config,
                    int n_samples, Rng& rng) {
  if (n_samples < 0) throw std::invalid_argument("sample: negative count");
  SampleResult res;
  res.grid = time_grid(config.n_steps);
  Eigen::MatrixXd z = rng.normal_mat(dim, n_samples);
  res.trajectory.push_back(z);
  for (int j = 0; j < config.n_steps; ++j) {
    const double t_hi = res.grid[j], t_lo = res.grid[j + 1];
    if (config.mode == SamplerMode::Sde) {
      z = sde_step(u, z, t_hi, t_lo, j == 0, rng);
    } else {
      const double t_eval = j == 0 ? t_lo : t_hi;
      Eigen::MatrixXd vel = u(z, t_eval);
      if (!vel.allFinite())
        throw std::runtime_error("sample: non-finite velocity at step " +
                                 std::to_string(j));
      z = z + (t_lo - t_hi) * vel;
    }
    if (!z.allFinite())
      throw std::runtime_error("sample: integration failure at step " +
                               std::to_string(j));
    res.trajectory.push_back(z);
  }
  res.samples = z;
  return res;
}

Eigen::VectorXd rollout_to_clean(const VelocityFn& u, const Eigen::VectorXd& z,
                                 double t_start, int n_steps, Rng& rng) {
  if (!(t_start >= 0.0 && t_start < 1.0))
    throw std::domain_error("rollout_to_clean: t_start must lie in [0,1)");
  Eigen::VectorXd grid = time_grid(n_steps);
  Eigen::MatrixXd cur = z;
  double t_hi = t_start;
  for (int j = 0; j <= n_steps; ++j) {
    const double t_lo = grid[j];
    if (t_lo >= t_start) continue;
    cur = sde_step(u, cur, t_hi, t_lo, /*first_step=*/false, rng);
    t_hi = t_lo;
  }
  return cur.col(0);
}

TrainHistory train_fm(VelocityModel& model, const gmm::GmmSpec& data,
                      const FmTrainConfig& config) {
  if (data.dim() != model.data_dim)
    throw std::invalid_argument("train_fm: data dimension mismatch");
  Rng data_rng = Rng::stream(config.seed, "train_fm.data");
  nn::AdamW opt;
  opt.lr = config.lr;
  Eigen::VectorXd params = nn::flatten_params(model.mlp);
  opt.init(params.size());

  TrainHistory hist;
  hist.loss.reserve(config.steps);
  const int B = config.batch;
  for (int step = 0; step < config.steps; ++step) {
    // cosine learning-rate decay from the configured peak
    opt.lr = config.lr * 0.5 * (1.0 + std::cos(M_PI * double(step) / config.steps));
    Eigen::MatrixXd z0 = gmm::sample(data, B, data_rng);
    Eigen::VectorXd ts(B);
    for (int i = 0; i < B; ++i) ts[i] = data_rng.uniform();
    Eigen::MatrixXd eps = data_rng.normal_mat(data.dim(), B);
    Eigen::MatrixXd zt(data.dim(), B);
    for (int i = 0; i < B; ++i)
      zt.col(i) = (1.0 - ts[i]) * z0.col(i) + ts[i] * eps.col(i);
    Eigen::MatrixXd target = eps - z0;

    Eigen::MatrixXd input(data.dim() + kTimeEmbedDim, B);
    input.topRows(data.dim()) = zt;
    for (int i = 0; i < B; ++i)
      input.bottomRows(kTimeEmbedDim).col(i) = time_embedding(ts[i]);

    nn::Tape tape;
    Eigen::MatrixXd out = nn::forward(model.mlp, input, &tape);
    Eigen::MatrixXd resid = out - target;
    const double loss = resid.squaredNorm() / B;
    if (!std::isfinite(loss))
      throw std::runtime_error("train_fm: training failure (non-finite loss) at step " +
                               std::to_string(step));
    hist.loss.push_back(loss);

    nn::Gradients grads = nn::zero_gradients(model.mlp);
    nn::backward(model.mlp, tape, 2.0 * resid / B, &grads);
    opt.step(params, nn::flatten_gradients(model.mlp, grads));
    nn::set_params(model.mlp, params);
  }
  return hist;
}

}  // namespace valstitch::gen

namespace valstitch::gen {

void save_velocity_model(const VelocityModel& model, const std::string& path) {
  nn::Checkpoint ckpt;
  ckpt.meta["type"] = "velocity-model";
  ckpt.meta["data_dim"] = model.data_dim;
  nn::add_mlp(ckpt, "velocity", model.mlp);
  ckpt.save(path);
}

VelocityModel load_velocity_model(const std::string& path) {
  nn::Checkpoint ckpt = nn::Checkpoint::load(path);
  if (ckpt.meta.value("type", "") != "velocity-model")
    throw std::runtime_error("load_velocity_model: wrong checkpoint type in " + path);
  VelocityModel m;
  m.mlp = nn::mlp_from_checkpoint(ckpt, "velocity");
  m.data_dim = ckpt.meta.at("data_dim").get<int>();
  if (m.mlp.input_dim() != m.data_dim + kTimeEmbedDim)
    throw std::runtime_error("load_velocity_model: inconsistent input width");
  return m;
}

}  // namespace valstitch::gen

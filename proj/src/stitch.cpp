#include "valstitch/stitch.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace valstitch::stitch {

namespace {

inline Eigen::MatrixXd silu_mat(const Eigen::MatrixXd& a) {
  return a.array() / (1.0 + (-a.array()).exp());
}

inline Eigen::ArrayXXd silu_deriv(const Eigen::MatrixXd& a) {
  Eigen::ArrayXXd s = 1.0 / (1.0 + (-a.array()).exp());
  return s * (1.0 + a.array() * (1.0 - s));
}

// Beta(2,2) draw: the median of three independent uniforms.
double beta22(Rng& rng) {
  double a = rng.uniform(), b = rng.uniform(), c = rng.uniform();
  const double lo = std::min({a, b, c});
  const double hi = std::max({a, b, c});
  return a + b + c - lo - hi;
}

// Flat views over the suffix layers [j0, depth) of an MLP.
Eigen::Index suffix_param_count(const nn::Mlp& mlp, int j0) {
  Eigen::Index n = 0;
  for (int l = j0; l < mlp.depth(); ++l)
    n += mlp.layers[l].w.size() + mlp.layers[l].b.size();
  return n;
}

Eigen::VectorXd flatten_suffix(const nn::Mlp& mlp, int j0) {
  Eigen::VectorXd flat(suffix_param_count(mlp, j0));
  Eigen::Index at = 0;
  for (int l = j0; l < mlp.depth(); ++l) {
    const auto& layer = mlp.layers[l];
    flat.segment(at, layer.w.size()) =
        Eigen::Map<const Eigen::VectorXd>(layer.w.data(), layer.w.size());
    at += layer.w.size();
    flat.segment(at, layer.b.size()) = layer.b;
    at += layer.b.size();
  }
  return flat;
}

void set_suffix(nn::Mlp& mlp, int j0, const Eigen::VectorXd& flat) {
  Eigen::Index at = 0;
  for (int l = j0; l < mlp.depth(); ++l) {
    auto& layer = mlp.layers[l];
    Eigen::Map<Eigen::VectorXd>(layer.w.data(), layer.w.size()) =
        flat.segment(at, layer.w.size());
    at += layer.w.size();
    layer.b = flat.segment(at, layer.b.size());
    at += layer.b.size();
  }
}

Eigen::VectorXd flatten_suffix_grads(const nn::Mlp& mlp, const nn::Gradients& g,
                                     int j0) {
  Eigen::VectorXd flat(suffix_param_count(mlp, j0));
  Eigen::Index at = 0;
  for (int l = j0; l < mlp.depth(); ++l) {
    flat.segment(at, g.dw[l].size()) =
        Eigen::Map<const Eigen::VectorXd>(g.dw[l].data(), g.dw[l].size());
    at += g.dw[l].size();
    flat.segment(at, g.db[l].size()) = g.db[l];
    at += g.db[l].size();
  }
  return flat;
}

std::uint64_t hash_point(std::uint64_t seed, const Eigen::VectorXd& z, double t) {
  std::uint64_t h = 0xcbf29ce484222325ull ^ seed;
  auto mix = [&h](std::uint64_t word) {
    for (int i = 0; i < 8; ++i) {
      h ^= (word >> (8 * i)) & 0xff;
      h *= 0x100000001b3ull;
    }
  };
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &z[i], 8);
    mix(bits);
  }
  std::uint64_t tb;
  std::memcpy(&tb, &t, 8);
  mix(tb);
  return h;
}

}  // namespace

Eigen::MatrixXd ProbeSet::zt() const {
  Eigen::MatrixXd out(z0.rows(), z0.cols());
  for (Eigen::Index c = 0; c < z0.cols(); ++c)
    out.col(c) = (1.0 - ts[c]) * z0.col(c) + ts[c] * eps.col(c);
  return out;
}

ProbeSet make_probe_set(const gmm::GmmSpec& data, int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("make_probe_set: need n >= 1");
  ProbeSet p;
  p.z0 = gmm::sample(data, n, rng);
  p.ts.resize(n);
  for (int i = 0; i < n; ++i) p.ts[i] = rng.uniform();
  p.eps = rng.normal_mat(data.dim(), n);
  return p;
}

StitchInterface fit_interface_matrices(const Eigen::MatrixXd& f,
                                       const Eigen::MatrixXd& g, int i, int j) {
  if (f.cols() == 0 || f.cols() != g.cols())
    throw std::invalid_argument("fit_interface: feature column mismatch");
  if (f.cwiseAbs().maxCoeff() == 0.0)
    throw std::runtime_error("fit_interface: rank-degenerate probe features");
  Eigen::MatrixXd normal = f * f.transpose();
  normal.diagonal().array() += 1e-8;  // ridge floor
  Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
  if (ldlt.info() != Eigen::Success)
    throw std::runtime_error("fit_interface: normal equations not solvable");
  StitchInterface out;
  out.i = i;
  out.j = j;
  out.w = ldlt.solve(f * g.transpose()).transpose();
  out.fit_loss = (out.w * f - g).squaredNorm() / double(f.cols());
  return out;
}

StitchInterface fit_interface(const gen::VelocityModel& generator,
                              const rew::RewardModel& reward, int i, int j,
                              const ProbeSet& probes) {
  Eigen::MatrixXd f = generator.features(probes.zt(), probes.ts, i);
  Eigen::MatrixXd g = rew::reward_features(reward, probes.z0, j);
  return fit_interface_matrices(f, g, i, j);
}

SearchResult search_interfaces(const FeatureFn& gen_features,
                               const std::vector<int>& i_range,
                               const FeatureFn& rew_features,
                               const std::vector<int>& j_range) {
  if (i_range.empty() || j_range.empty())
    throw std::invalid_argument("search_interfaces: empty candidate range");
  SearchResult res;
  std::vector<std::pair<int, Eigen::MatrixXd>> fs, gs;
  for (int i : i_range) fs.emplace_back(i, gen_features(i));
  for (int j : j_range) gs.emplace_back(j, rew_features(j));
  for (const auto& [i, f] : fs) {
    for (const auto& [j, g] : gs) {
      try {
        res.ranked.push_back(fit_interface_matrices(f, g, i, j));
      } catch (const std::runtime_error&) {
        res.skipped.emplace_back(i, j);
      }
    }
  }
  if (res.ranked.empty())
    throw std::runtime_error("search_interfaces: every candidate pair degenerate");
  std::sort(res.ranked.begin(), res.ranked.end(),
            [](const StitchInterface& a, const StitchInterface& b) {
              if (a.fit_loss != b.fit_loss) return a.fit_loss < b.fit_loss;
              if (a.i != b.i) return a.i < b.i;
              return a.j < b.j;
            });
  return res;
}

SearchResult search_interfaces(const gen::VelocityModel& generator,
                               const rew::RewardModel& reward,
                               const ProbeSet& probes,
                               const std::vector<int>& i_range,
                               const std::vector<int>& j_range) {
  for (int j : j_range)
    if (j > 4)
      throw std::invalid_argument("search_interfaces: reward slice capped at j <= 4");
  Eigen::MatrixXd zt = probes.zt();
  auto gen_fn = [&](int i) { return generator.features(zt, probes.ts, i); };
  auto rew_fn = [&](int j) { return rew::reward_features(reward, probes.z0, j); };
  return search_interfaces(gen_fn, i_range, rew_fn, j_range);
}

Eigen::MatrixXd StitchLayer::forward(const Eigen::MatrixXd& h) const {
  Eigen::MatrixXd y = (f_w * h).colwise() + f_b;
  Eigen::MatrixXd s0 = silu_mat(y);
  Eigen::MatrixXd a1 = (g1_w * s0).colwise() + g1_b;
  Eigen::MatrixXd s1 = silu_mat(a1);
  return y + ((g2_w * s1).colwise() + g2_b);
}

Eigen::MatrixXd StitchLayer::forward(const Eigen::MatrixXd& h, Tape& tape) const {
  tape.h = h;
  tape.y = (f_w * h).colwise() + f_b;
  tape.s0 = silu_mat(tape.y);
  tape.a1 = (g1_w * tape.s0).colwise() + g1_b;
  tape.s1 = silu_mat(tape.a1);
  return tape.y + ((g2_w * tape.s1).colwise() + g2_b);
}

StitchLayer::Grads StitchLayer::zero_grads() const {
  Grads g;
  g.f_w = Eigen::MatrixXd::Zero(f_w.rows(), f_w.cols());
  g.f_b = Eigen::VectorXd::Zero(f_b.size());
  g.g1_w = Eigen::MatrixXd::Zero(g1_w.rows(), g1_w.cols());
  g.g1_b = Eigen::VectorXd::Zero(g1_b.size());
  g.g2_w = Eigen::MatrixXd::Zero(g2_w.rows(), g2_w.cols());
  g.g2_b = Eigen::VectorXd::Zero(g2_b.size());
  return g;
}

Eigen::MatrixXd StitchLayer::backward(const Tape& tape, const Eigen::MatrixXd& dout,
                                      Grads& grads) const {
  grads.g2_w += dout * tape.s1.transpose();
  grads.g2_b += dout.rowwise().sum();
  Eigen::MatrixXd ds1 = g2_w.transpose() * dout;
  Eigen::MatrixXd da1 = (ds1.array() * silu_deriv(tape.a1)).matrix();
  grads.g1_w += da1 * tape.s0.transpose();
  grads.g1_b += da1.rowwise().sum();
  Eigen::MatrixXd ds0 = g1_w.transpose() * da1;
  Eigen::MatrixXd dy = dout + (ds0.array() * silu_deriv(tape.y)).matrix();
  grads.f_w += dy * tape.h.transpose();
  grads.f_b += dy.rowwise().sum();
  return f_w.transpose() * dy;
}

Eigen::Index StitchLayer::param_count() const {
  return f_w.size() + f_b.size() + g1_w.size() + g1_b.size() + g2_w.size() +
         g2_b.size();
}

Eigen::VectorXd StitchLayer::flatten_params() const {
  Eigen::VectorXd flat(param_count());
  Eigen::Index at = 0;
  auto put_m = [&](const Eigen::MatrixXd& m) {
    flat.segment(at, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    at += m.size();
  };
  auto put_v = [&](const Eigen::VectorXd& v) {
    flat.segment(at, v.size()) = v;
    at += v.size();
  };
  put_m(f_w);
  put_v(f_b);
  put_m(g1_w);
  put_v(g1_b);
  put_m(g2_w);
  put_v(g2_b);
  return flat;
}

void StitchLayer::set_params(const Eigen::VectorXd& flat) {
  if (flat.size() != param_count())
    throw std::invalid_argument("StitchLayer::set_params: size mismatch");
  Eigen::Index at = 0;
  auto get_m = [&](Eigen::MatrixXd& m) {
    Eigen::Map<Eigen::VectorXd>(m.data(), m.size()) = flat.segment(at, m.size());
    at += m.size();
  };
  auto get_v = [&](Eigen::VectorXd& v) {
    v = flat.segment(at, v.size());
    at += v.size();
  };
  get_m(f_w);
  get_v(f_b);
  get_m(g1_w);
  get_v(g1_b);
  get_m(g2_w);
  get_v(g2_b);
}

Eigen::VectorXd StitchLayer::flatten_grads(const Grads& g) const {
  StitchLayer tmp;  // reuse the packing order via a scratch layer
  tmp.f_w = g.f_w;
  tmp.f_b = g.f_b;
  tmp.g1_w = g.g1_w;
  tmp.g1_b = g.g1_b;
  tmp.g2_w = g.g2_w;
  tmp.g2_b = g.g2_b;
  return tmp.flatten_params();
}

StitchLayer make_stitch_layer(const StitchInterface& iface, Rng& rng,
                              int bottleneck_ratio) {
  const int q = static_cast<int>(iface.w.rows());
  const int p = static_cast<int>(iface.w.cols());
  if (q == 0 || p == 0) throw std::invalid_argument("make_stitch_layer: empty map");
  const int bneck = std::max(1, q / bottleneck_ratio);
  StitchLayer s;
  s.f_w = iface.w;
  s.f_b = Eigen::VectorXd::Zero(q);
  s.g1_w = std::sqrt(2.0 / q) * rng.normal_mat(bneck, q);
  s.g1_b = Eigen::VectorXd::Zero(bneck);
  s.g2_w = Eigen::MatrixXd::Zero(q, bneck);  // zero init: layer is F at start
  s.g2_b = Eigen::VectorXd::Zero(q);
  return s;
}

Eigen::RowVectorXd StitchedValueModel::value_batch(const Eigen::MatrixXd& z,
                                                   double t) const {
  Eigen::MatrixXd h = generator.features(z, t, i);
  return rew::reward_suffix(reward_tail, layer.forward(h), j);
}

Eigen::RowVectorXd StitchedValueModel::value_batch(const Eigen::MatrixXd& z,
                                                   const Eigen::VectorXd& ts) const {
  Eigen::MatrixXd h = generator.features(z, ts, i);
  return rew::reward_suffix(reward_tail, layer.forward(h), j);
}

double StitchedValueModel::value(const Eigen::VectorXd& z, double t) const {
  return value_batch(Eigen::MatrixXd(z), t)[0];
}

Eigen::VectorXd StitchedValueModel::grad_value(const Eigen::VectorXd& z,
                                               double t) const {
  Eigen::MatrixXd input(z.size() + gen::kTimeEmbedDim, 1);
  input.topRows(z.size()) = z;
  input.bottomRows(gen::kTimeEmbedDim) = gen::time_embedding(t);

  nn::Tape prefix_tape;
  Eigen::MatrixXd h =
      nn::forward_range(generator.mlp, input, 0, i, &prefix_tape);
  StitchLayer::Tape stitch_tape;
  Eigen::MatrixXd y = layer.forward(h, stitch_tape);
  nn::Tape suffix_tape;
  nn::forward_range(reward_tail.mlp, y, j - 1, reward_tail.depth(), &suffix_tape);

  Eigen::MatrixXd dy =
      nn::backward(reward_tail.mlp, suffix_tape, Eigen::MatrixXd::Ones(1, 1));
  StitchLayer::Grads scratch = layer.zero_grads();
  Eigen::MatrixXd dh = layer.backward(stitch_tape, dy, scratch);
  Eigen::MatrixXd dinput = nn::backward(generator.mlp, prefix_tape, dh);
  return dinput.topRows(z.size()).col(0);
}

StitchedValueModel assemble_stitched_model(const gen::VelocityModel& generator,
                                           const rew::RewardModel& reward,
                                           const StitchInterface& iface, Rng& rng) {
  if (reward.kind != rew::RewardKind::Learned)
    throw std::invalid_argument("assemble_stitched_model: analytic reward has no tail");
  StitchedValueModel m;
  m.generator = generator;
  m.i = iface.i;
  m.layer = make_stitch_layer(iface, rng);
  m.reward_tail = reward;
  m.j = iface.j;
  return m;
}

StitchTrainHistory train_stitch(StitchedValueModel& model, const gmm::GmmSpec& data,
                                const rew::RewardModel& frozen_teacher,
                                const StitchTrainConfig& config) {
  Rng data_rng = Rng::stream(config.seed, "train_stitch.data");
  const int j0 = model.j - 1;  // first trainable reward layer, 0-based
  nn::Mlp& tail = model.reward_tail.mlp;

  const Eigen::Index n_stitch = model.layer.param_count();
  const Eigen::Index n_suffix = suffix_param_count(tail, j0);
  Eigen::VectorXd params(n_stitch + n_suffix);
  params.head(n_stitch) = model.layer.flatten_params();
  params.tail(n_suffix) = flatten_suffix(tail, j0);

  nn::AdamW opt;
  opt.lr = config.lr;
  opt.init(params.size());
  opt.lr_scale = Eigen::VectorXd::Ones(params.size());
  opt.lr_scale.head(n_stitch).setConstant(config.stitch_lr_multiplier);

  StitchTrainHistory hist;
  hist.loss.reserve(config.steps);
  const int B = config.batch;
  for (int step = 0; step < config.steps; ++step) {
    opt.lr = config.lr * 0.5 * (1.0 + std::cos(M_PI * double(step) / config.steps));
    Eigen::MatrixXd z0 = gmm::sample(data, B, data_rng);
    Eigen::VectorXd ts(B);
    for (int c = 0; c < B; ++c) ts[c] = beta22(data_rng);
    Eigen::MatrixXd eps = data_rng.normal_mat(data.dim(), B);
    Eigen::MatrixXd zt(data.dim(), B);
    for (int c = 0; c < B; ++c)
      zt.col(c) = (1.0 - ts[c]) * z0.col(c) + ts[c] * eps.col(c);
    Eigen::RowVectorXd target = rew::reward_batch(frozen_teacher, z0);

    // prefix (frozen, no tape), then stitch and suffix with tapes
    Eigen::MatrixXd h = model.generator.features(zt, ts, model.i);
    StitchLayer::Tape stitch_tape;
    Eigen::MatrixXd y = model.layer.forward(h, stitch_tape);
    nn::Tape suffix_tape;
    Eigen::MatrixXd out = nn::forward_range(tail, y, j0, tail.depth(), &suffix_tape);

    Eigen::MatrixXd resid = out.row(0) - target;
    const double loss = resid.squaredNorm() / B;
    if (!std::isfinite(loss))
      throw std::runtime_error("train_stitch: training failure at step " +
                               std::to_string(step));
    hist.loss.push_back(loss);

    nn::Gradients tail_grads = nn::zero_gradients(tail);
    Eigen::MatrixXd dy =
        nn::backward(tail, suffix_tape, 2.0 * resid / B, &tail_grads);
    StitchLayer::Grads stitch_grads = model.layer.zero_grads();
    model.layer.backward(stitch_tape, dy, stitch_grads);

    Eigen::VectorXd flat_grads(params.size());
    flat_grads.head(n_stitch) = model.layer.flatten_grads(stitch_grads);
    flat_grads.tail(n_suffix) = flatten_suffix_grads(tail, tail_grads, j0);
    opt.step(params, flat_grads);
    model.layer.set_params(params.head(n_stitch));
    set_suffix(tail, j0, params.tail(n_suffix));
  }
  return hist;
}

// ---------------------------------------------------------------------------

Eigen::VectorXd ValueEstimator::grad_value(const Eigen::VectorXd&, double) const {
  throw std::logic_error(name() + ": value estimate is not differentiable");
}

AnalyticEstimator::AnalyticEstimator(gmm::GmmSpec g, gmm::LinearReward r,
                                     AnalyticMode mode)
    : g_(std::move(g)), r_(std::move(r)), mode_(mode) {}

double AnalyticEstimator::value(const Eigen::VectorXd& z, double t) const {
  if (mode_ == AnalyticMode::Standard) return gmm::value(g_, r_, t, z);
  return gmm::soft_value(g_, r_, t, z);
}

Eigen::VectorXd AnalyticEstimator::grad_value(const Eigen::VectorXd& z,
                                              double t) const {
  if (mode_ == AnalyticMode::Standard) return gmm::value_grad(g_, r_, t, z);
  return gmm::soft_value_grad(g_, r_, t, z);
}

std::string AnalyticEstimator::name() const {
  return mode_ == AnalyticMode::Standard ? "analytic" : "analytic-soft";
}

EvalCost AnalyticEstimator::cost_at(double) const {
  return {};  // closed form: the referee costs nothing in model evaluations
}

TweedieEstimator::TweedieEstimator(gen::VelocityModel model, rew::RewardModel reward)
    : model_(std::move(model)), reward_(std::move(reward)) {}

TweedieEstimator::TweedieEstimator(gmm::GmmSpec g, rew::RewardModel reward)
    : g_(std::move(g)), reward_(std::move(reward)) {}

double TweedieEstimator::value(const Eigen::VectorXd& z, double t) const {
  Eigen::VectorXd denoised;
  if (model_) {
    denoised = z - t * model_->velocity(z, t);
  } else {
    denoised = gmm::posterior_mean(*g_, t, z);
  }
  return rew::reward(reward_, denoised);
}

Eigen::VectorXd TweedieEstimator::grad_value(const Eigen::VectorXd& z,
                                             double t) const {
  const Eigen::Index d = z.size();
  if (model_) {
    Eigen::MatrixXd input(d + gen::kTimeEmbedDim, 1);
    input.topRows(d) = z;
    input.bottomRows(gen::kTimeEmbedDim) = gen::time_embedding(t);
    nn::Tape tape;
    Eigen::MatrixXd u = nn::forward(model_->mlp, input, &tape);
    Eigen::VectorXd denoised = z - t * u.col(0);
    Eigen::VectorXd rg = rew::reward_grad(reward_, denoised);
    Eigen::MatrixXd dinput = nn::backward(model_->mlp, tape, rg);
    return rg - t * dinput.topRows(d).col(0);
  }
  Eigen::VectorXd denoised = gmm::posterior_mean(*g_, t, z);
  Eigen::VectorXd rg = rew::reward_grad(reward_, denoised);
  if (t == 0.0) return rg;
  Eigen::MatrixXd jac = (Eigen::MatrixXd::Identity(d, d) +
                         t * t * gmm::log_density_hessian(*g_, t, z)) /
                        (1.0 - t);
  return jac.transpose() * rg;
}

EvalCost TweedieEstimator::cost_at(double) const {
  EvalCost c;
  c.full_model_evals = 1.0;
  c.decoder_evals = 1.0;
  if (model_) {
    c.layer_evals += model_->mlp.depth();
    c.flops += mlp_flops(model_->mlp, 0, model_->mlp.depth());
  }
  if (reward_.kind == rew::RewardKind::Learned) {
    c.layer_evals += reward_.mlp.depth();
    c.flops += mlp_flops(reward_.mlp, 0, reward_.mlp.depth());
  }
  return c;
}

McEstimator::McEstimator(gen::VelocityFn velocity, rew::RewardModel reward,
                         int n_rollouts, int n_steps, std::uint64_t seed, bool soft)
    : velocity_(std::move(velocity)),
      reward_(std::move(reward)),
      n_rollouts_(n_rollouts),
      n_steps_(n_steps),
      seed_(seed),
      soft_(soft) {
  if (n_rollouts_ < 1)
    throw std::invalid_argument("McEstimator: n_rollouts must be >= 1");
}

double McEstimator::value(const Eigen::VectorXd& z, double t) const {
  return value_with_stderr(z, t, nullptr);
}

double McEstimator::value_with_stderr(const Eigen::VectorXd& z, double t,
                                      double* stderr_out) const {
  Rng rng(hash_point(seed_, z, t));
  std::vector<double> rewards(n_rollouts_);
  for (int i = 0; i < n_rollouts_; ++i) {
    Eigen::VectorXd clean = gen::rollout_to_clean(velocity_, z, t, n_steps_, rng);
    rewards[i] = rew::reward(reward_, clean);
  }
  double est;
  if (soft_) {
    double mx = *std::max_element(rewards.begin(), rewards.end());
    double s = 0.0;
    for (double r : rewards) s += std::exp(r - mx);
    est = mx + std::log(s / n_rollouts_);
  } else {
    double s = 0.0;
    for (double r : rewards) s += r;
    est = s / n_rollouts_;
  }
  if (stderr_out) {
    double mean = 0.0, ss = 0.0;
    for (double r : rewards) mean += r;
    mean /= n_rollouts_;
    for (double r : rewards) ss += (r - mean) * (r - mean);
    *stderr_out =
        n_rollouts_ > 1 ? std::sqrt(ss / (n_rollouts_ - 1) / n_rollouts_) : 0.0;
  }
  return est;
}

EvalCost McEstimator::cost_at(double t) const {
  // remaining grid points strictly below t
  Eigen::VectorXd grid = gen::time_grid(n_steps_);
  int remaining = 0;
  for (int j = 0; j <= n_steps_; ++j)
    if (grid[j] < t) ++remaining;
  EvalCost c;
  c.full_model_evals = double(n_rollouts_) * remaining;
  c.decoder_evals = double(n_rollouts_);
  if (reward_.kind == rew::RewardKind::Learned)
    c.layer_evals = double(n_rollouts_) * reward_.mlp.depth();
  return c;
}

StitchEstimator::StitchEstimator(StitchedValueModel model) : model_(std::move(model)) {}

double StitchEstimator::value(const Eigen::VectorXd& z, double t) const {
  return model_.value(z, t);
}

Eigen::VectorXd StitchEstimator::grad_value(const Eigen::VectorXd& z, double t) const {
  return model_.grad_value(z, t);
}

EvalCost StitchEstimator::cost_at(double) const {
  EvalCost c;
  c.prefix_evals = 1.0;
  c.layer_evals = double(model_.i) +
                  double(model_.reward_tail.depth() - model_.j + 1);
  c.flops = mlp_flops(model_.generator.mlp, 0, model_.i) +
            2.0 * (model_.layer.f_w.size() + model_.layer.g1_w.size() +
                   model_.layer.g2_w.size()) +
            mlp_flops(model_.reward_tail.mlp, model_.j - 1,
                      model_.reward_tail.depth());
  return c;
}

double mlp_flops(const nn::Mlp& mlp, int begin, int end) {
  double f = 0.0;
  for (int l = begin; l < end; ++l) f += 2.0 * mlp.layers[l].w.size();
  return f;
}

}  // namespace valstitch::stitch

#include "valstitch/checkpoint.hpp"

namespace valstitch::stitch {

void save_stitched(const StitchedValueModel& model, const std::string& path) {
  nn::Checkpoint ckpt;
  ckpt.meta["type"] = "stitched-value-model";
  ckpt.meta["i"] = model.i;
  ckpt.meta["j"] = model.j;
  ckpt.meta["data_dim"] = model.generator.data_dim;
  nn::add_mlp(ckpt, "generator", model.generator.mlp);
  nn::add_mlp(ckpt, "reward_tail", model.reward_tail.mlp);
  ckpt.add_array("layer.f_w", model.layer.f_w);
  ckpt.add_vector("layer.f_b", model.layer.f_b);
  ckpt.add_array("layer.g1_w", model.layer.g1_w);
  ckpt.add_vector("layer.g1_b", model.layer.g1_b);
  ckpt.add_array("layer.g2_w", model.layer.g2_w);
  ckpt.add_vector("layer.g2_b", model.layer.g2_b);
  ckpt.save(path);
}

StitchedValueModel load_stitched(const std::string& path) {
  nn::Checkpoint ckpt = nn::Checkpoint::load(path);
  if (ckpt.meta.value("type", "") != "stitched-value-model")
    throw std::runtime_error("load_stitched: wrong checkpoint type in " + path);
  StitchedValueModel m;
  m.i = ckpt.meta.at("i").get<int>();
  m.j = ckpt.meta.at("j").get<int>();
  m.generator.mlp = nn::mlp_from_checkpoint(ckpt, "generator");
  m.generator.data_dim = ckpt.meta.at("data_dim").get<int>();
  m.reward_tail = rew::learned_reward(nn::mlp_from_checkpoint(ckpt, "reward_tail"));
  m.layer.f_w = ckpt.array("layer.f_w");
  m.layer.f_b = ckpt.array("layer.f_b");
  m.layer.g1_w = ckpt.array("layer.g1_w");
  m.layer.g1_b = ckpt.array("layer.g1_b");
  m.layer.g2_w = ckpt.array("layer.g2_w");
  m.layer.g2_b = ckpt.array("layer.g2_b");
  return m;
}

}  // namespace valstitch::stitch

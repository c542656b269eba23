#include "valstitch/gmm.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <stdexcept>

namespace valstitch::gmm {

namespace {

constexpr int kMaxDim = 8;
constexpr int kMaxComponents = 8;

void check_time_range(double t, bool exclude_one, const char* what) {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::domain_error(std::string(what) + ": t must lie in [0,1]");
  if (exclude_one && t == 1.0)
    throw std::domain_error(std::string(what) +
                            ": posterior is undefined at t = 1");
}

double log_sum_exp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

// Per-component machinery of the time-t marginal, cached for one evaluation.
struct MarginalEval {
  double alpha;
  double sigma;
  std::vector<Eigen::LLT<Eigen::MatrixXd>> chol;  // of V_k = a^2 Sigma_k + s^2 I
  std::vector<Eigen::VectorXd> comp_mean;         // alpha mu_k
  Eigen::VectorXd log_norm;                       // -(d/2)log(2pi) - (1/2)log|V_k|

  MarginalEval(const GmmSpec& g, double t) {
    const int K = g.components();
    const int d = g.dim();
    alpha = 1.0 - t;
    sigma = t;
    chol.reserve(K);
    comp_mean.reserve(K);
    log_norm.resize(K);
    const double half_log_2pi = 0.5 * std::log(2.0 * M_PI);
    for (int k = 0; k < K; ++k) {
      Eigen::MatrixXd v = alpha * alpha * g.covs[k] +
                          sigma * sigma * Eigen::MatrixXd::Identity(d, d);
      chol.emplace_back(v);
      if (chol.back().info() != Eigen::Success)
        throw std::runtime_error("gmm: marginal covariance not positive definite");
      comp_mean.push_back(alpha * g.means[k]);
      double log_det = 0.0;
      for (int i = 0; i < d; ++i) log_det += std::log(chol.back().matrixL()(i, i));
      log_norm[k] = -d * half_log_2pi - log_det;
    }
  }

  // log N(z; comp_mean_k, V_k) for every component.
  Eigen::VectorXd comp_log_density(const Eigen::VectorXd& z) const {
    const int K = static_cast<int>(chol.size());
    Eigen::VectorXd out(K);
    for (int k = 0; k < K; ++k) {
      Eigen::VectorXd r = z - comp_mean[k];
      Eigen::VectorXd w = chol[k].matrixL().solve(r);
      out[k] = log_norm[k] - 0.5 * w.squaredNorm();
    }
    return out;
  }

  Eigen::VectorXd responsibilities(const GmmSpec& g, const Eigen::VectorXd& z) const {
    Eigen::VectorXd lr = comp_log_density(z) + g.weights.array().log().matrix();
    const double lse = log_sum_exp(lr);
    return (lr.array() - lse).exp();
  }
};

// Joint-Gaussian conditioning of component k at (t, z):
//   mean  mu_k + alpha Sigma_k V_k^{-1} (z - alpha mu_k)
//   cov   Sigma_k - alpha^2 Sigma_k V_k^{-1} Sigma_k
// Valid for all t in [0, 1); at t = 0 it degenerates to (z, 0).
struct ComponentPosterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

ComponentPosterior component_posterior(const GmmSpec& g, const MarginalEval& ev,
                                       int k, const Eigen::VectorXd& z) {
  if (ev.sigma == 0.0) {
    return {z, Eigen::MatrixXd::Zero(g.dim(), g.dim())};
  }
  Eigen::VectorXd r = z - ev.comp_mean[k];
  Eigen::MatrixXd vinv_sigma = ev.chol[k].solve(g.covs[k]);  // V_k^{-1} Sigma_k
  ComponentPosterior post;
  post.mean = g.means[k] + ev.alpha * vinv_sigma.transpose() * r;
  post.cov = g.covs[k] - ev.alpha * ev.alpha * g.covs[k] * vinv_sigma;
  return post;
}

}  // namespace

GmmSpec make_gmm(Eigen::VectorXd weights, std::vector<Eigen::VectorXd> means,
                 std::vector<Eigen::MatrixXd> covs) {
  const int K = static_cast<int>(weights.size());
  if (K == 0 || means.size() != static_cast<size_t>(K) ||
      covs.size() != static_cast<size_t>(K))
    throw std::invalid_argument("gmm: weights/means/covs must share length K >= 1");
  if (K > kMaxComponents)
    throw std::invalid_argument("gmm: at most 8 components supported");
  const int d = static_cast<int>(means[0].size());
  if (d == 0 || d > kMaxDim)
    throw std::invalid_argument("gmm: dimension must lie in [1, 8]");
  if (std::abs(weights.sum() - 1.0) > 1e-12)
    throw std::invalid_argument("gmm: weights must sum to 1 within 1e-12");
  for (int k = 0; k < K; ++k) {
    if (!(weights[k] > 0.0))
      throw std::invalid_argument("gmm: weights must be strictly positive");
    if (means[k].size() != d || covs[k].rows() != d || covs[k].cols() != d)
      throw std::invalid_argument("gmm: inconsistent component dimensions");
    if (!covs[k].isApprox(covs[k].transpose(), 1e-10))
      throw std::invalid_argument("gmm: covariance must be symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(covs[k]);
    if (llt.info() != Eigen::Success)
      throw std::invalid_argument("gmm: covariance must be positive definite");
  }
  return GmmSpec{std::move(weights), std::move(means), std::move(covs)};
}

GmmSpec isotropic_gmm(const Eigen::VectorXd& weights,
                      const std::vector<Eigen::VectorXd>& means, double var) {
  const int d = static_cast<int>(means.at(0).size());
  std::vector<Eigen::MatrixXd> covs(means.size(),
                                    var * Eigen::MatrixXd::Identity(d, d));
  return make_gmm(weights, means, covs);
}

GmmSpec marginal(const GmmSpec& g, double t) {
  check_time_range(t, false, "gmm::marginal");
  const double a = 1.0 - t, s = t;
  GmmSpec out = g;
  const int d = g.dim();
  for (int k = 0; k < g.components(); ++k) {
    out.means[k] = a * g.means[k];
    out.covs[k] = a * a * g.covs[k] + s * s * Eigen::MatrixXd::Identity(d, d);
  }
  return out;
}

double log_density(const GmmSpec& g, const Eigen::VectorXd& z) {
  MarginalEval ev(g, 0.0);
  Eigen::VectorXd lr = ev.comp_log_density(z) + g.weights.array().log().matrix();
  return log_sum_exp(lr);
}

Eigen::VectorXd score(const GmmSpec& g, double t, const Eigen::VectorXd& z) {
  check_time_range(t, false, "gmm::score");
  MarginalEval ev(g, t);
  Eigen::VectorXd resp = ev.responsibilities(g, z);
  Eigen::VectorXd s = Eigen::VectorXd::Zero(g.dim());
  for (int k = 0; k < g.components(); ++k)
    s += resp[k] * ev.chol[k].solve(ev.comp_mean[k] - z);
  return s;
}

Eigen::MatrixXd score_batch(const GmmSpec& g, double t, const Eigen::MatrixXd& zs) {
  check_time_range(t, false, "gmm::score_batch");
  MarginalEval ev(g, t);
  const int K = g.components();
  const int d = g.dim();
  const Eigen::Index n = zs.cols();

  Eigen::MatrixXd log_resp(K, n);
  std::vector<Eigen::MatrixXd> comp_score(K);
  for (int k = 0; k < K; ++k) {
    Eigen::MatrixXd r = ev.comp_mean[k].replicate(1, n) - zs;
    Eigen::MatrixXd w = ev.chol[k].matrixL().solve(r);
    log_resp.row(k) =
        Eigen::RowVectorXd::Constant(n, ev.log_norm[k] + std::log(g.weights[k])) -
        0.5 * w.colwise().squaredNorm();
    comp_score[k] = ev.chol[k].solve(r);
  }
  Eigen::RowVectorXd m = log_resp.colwise().maxCoeff();
  Eigen::MatrixXd resp = (log_resp.rowwise() - m).array().exp().matrix();
  Eigen::RowVectorXd colsum = resp.colwise().sum();
  for (int k = 0; k < K; ++k)
    resp.row(k) = resp.row(k).cwiseQuotient(colsum);

  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d, n);
  for (int k = 0; k < K; ++k)
    out += comp_score[k] * resp.row(k).asDiagonal();
  return out;
}

Eigen::MatrixXd log_density_hessian(const GmmSpec& g, double t,
                                    const Eigen::VectorXd& z) {
  check_time_range(t, false, "gmm::log_density_hessian");
  MarginalEval ev(g, t);
  const int d = g.dim();
  Eigen::VectorXd resp = ev.responsibilities(g, z);
  Eigen::VectorXd sbar = Eigen::VectorXd::Zero(d);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(d, d);
  for (int k = 0; k < g.components(); ++k) {
    Eigen::VectorXd sk = ev.chol[k].solve(ev.comp_mean[k] - z);
    Eigen::MatrixXd vinv = ev.chol[k].solve(Eigen::MatrixXd::Identity(d, d));
    h += resp[k] * (sk * sk.transpose() - vinv);
    sbar += resp[k] * sk;
  }
  h -= sbar * sbar.transpose();
  return h;
}

Eigen::VectorXd posterior_mean(const GmmSpec& g, double t, const Eigen::VectorXd& z) {
  check_time_range(t, true, "gmm::posterior_mean");
  if (t == 0.0) return z;
  MarginalEval ev(g, t);
  Eigen::VectorXd resp = ev.responsibilities(g, z);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(g.dim());
  for (int k = 0; k < g.components(); ++k)
    mean += resp[k] * component_posterior(g, ev, k, z).mean;
  return mean;
}

Eigen::MatrixXd posterior_mean_batch(const GmmSpec& g, double t,
                                     const Eigen::MatrixXd& zs) {
  check_time_range(t, true, "gmm::posterior_mean_batch");
  if (t == 0.0) return zs;
  // Tweedie route: D = (z + sigma^2 score) / alpha.
  const double a = 1.0 - t, s = t;
  return (zs + s * s * score_batch(g, t, zs)) / a;
}

double value(const GmmSpec& g, const LinearReward& r, double t,
             const Eigen::VectorXd& z) {
  check_time_range(t, true, "gmm::value");
  return r.a.dot(posterior_mean(g, t, z)) + r.b;
}

Eigen::VectorXd value_grad(const GmmSpec& g, const LinearReward& r, double t,
                           const Eigen::VectorXd& z) {
  check_time_range(t, true, "gmm::value_grad");
  if (t == 0.0) return r.a;
  // grad (a' D(z)) with D = (z + sigma^2 score)/alpha, so
  // J_D = (I + sigma^2 Hess log p_t) / alpha.
  const double a = 1.0 - t, s = t;
  Eigen::MatrixXd jac =
      (Eigen::MatrixXd::Identity(g.dim(), g.dim()) +
       s * s * log_density_hessian(g, t, z)) /
      a;
  return jac.transpose() * r.a;
}

double tempered_soft_value(const GmmSpec& g, const LinearReward& r, double lambda,
                           double t, const Eigen::VectorXd& z) {
  check_time_range(t, true, "gmm::soft_value");
  if (t == 0.0) return lambda * (r.a.dot(z) + r.b);
  MarginalEval ev(g, t);
  Eigen::VectorXd lr = ev.comp_log_density(z) + g.weights.array().log().matrix();
  const double lse = log_sum_exp(lr);
  Eigen::VectorXd terms(g.components());
  for (int k = 0; k < g.components(); ++k) {
    ComponentPosterior post = component_posterior(g, ev, k, z);
    const double m = lambda * (r.a.dot(post.mean) + r.b);
    const double v = lambda * lambda * r.a.dot(post.cov * r.a);
    terms[k] = (lr[k] - lse) + m + 0.5 * v;
  }
  return log_sum_exp(terms);
}

double soft_value(const GmmSpec& g, const LinearReward& r, double t,
                  const Eigen::VectorXd& z) {
  return tempered_soft_value(g, r, 1.0, t, z);
}

Eigen::VectorXd soft_value_grad(const GmmSpec& g, const LinearReward& r, double t,
                                const Eigen::VectorXd& z) {
  check_time_range(t, true, "gmm::soft_value_grad");
  // Tilted-score identity: grad V_t = score of the tilted marginal minus the
  // score of the base marginal.
  return score(tilted(g, r), t, z) - score(g, t, z);
}

double posterior_reward_variance(const GmmSpec& g, const LinearReward& r, double t,
                                 const Eigen::VectorXd& z) {
  check_time_range(t, true, "gmm::posterior_reward_variance");
  if (t == 0.0) return 0.0;
  MarginalEval ev(g, t);
  Eigen::VectorXd resp = ev.responsibilities(g, z);
  double first = 0.0, second = 0.0;
  for (int k = 0; k < g.components(); ++k) {
    ComponentPosterior post = component_posterior(g, ev, k, z);
    const double m = r.a.dot(post.mean) + r.b;
    const double v = r.a.dot(post.cov * r.a);
    first += resp[k] * m;
    second += resp[k] * (m * m + v);
  }
  return second - first * first;
}

GmmSpec tilted(const GmmSpec& g, const LinearReward& r) {
  return tilted(g, r, 1.0);
}

GmmSpec tilted(const GmmSpec& g, const LinearReward& r, double lambda) {
  if (r.a.size() != g.dim())
    throw std::invalid_argument("gmm::tilted: reward dimension mismatch");
  const int K = g.components();
  Eigen::VectorXd a = lambda * r.a;
  Eigen::VectorXd logw(K);
  GmmSpec out = g;
  for (int k = 0; k < K; ++k) {
    logw[k] = std::log(g.weights[k]) + a.dot(g.means[k]) +
              0.5 * a.dot(g.covs[k] * a);
    out.means[k] = g.means[k] + g.covs[k] * a;
  }
  const double lse = log_sum_exp(logw);
  out.weights = (logw.array() - lse).exp();
  // Guard against rounding drift in the weight sum.
  out.weights /= out.weights.sum();
  return out;
}

Eigen::VectorXd sample(const GmmSpec& g, Rng& rng) {
  const int k = rng.categorical(g.weights);
  Eigen::LLT<Eigen::MatrixXd> llt(g.covs[k]);
  return g.means[k] + llt.matrixL() * rng.normal_vec(g.dim());
}

Eigen::MatrixXd sample(const GmmSpec& g, int n, Rng& rng) {
  Eigen::MatrixXd out(g.dim(), n);
  std::vector<Eigen::LLT<Eigen::MatrixXd>> llt;
  llt.reserve(g.components());
  for (int k = 0; k < g.components(); ++k) llt.emplace_back(g.covs[k]);
  for (int i = 0; i < n; ++i) {
    const int k = rng.categorical(g.weights);
    out.col(i) = g.means[k] + llt[k].matrixL() * rng.normal_vec(g.dim());
  }
  return out;
}

Eigen::VectorXd sample_posterior(const GmmSpec& g, double t,
                                 const Eigen::VectorXd& z, Rng& rng) {
  check_time_range(t, true, "gmm::sample_posterior");
  if (t == 0.0) return z;
  MarginalEval ev(g, t);
  Eigen::VectorXd resp = ev.responsibilities(g, z);
  const int k = rng.categorical(resp);
  ComponentPosterior post = component_posterior(g, ev, k, z);
  // The conditional covariance is PSD but can be near-singular at small t.
  Eigen::LDLT<Eigen::MatrixXd> ldlt(post.cov);
  Eigen::VectorXd d = ldlt.vectorD().cwiseMax(0.0).cwiseSqrt();
  Eigen::MatrixXd l = ldlt.matrixL();
  Eigen::VectorXd noise =
      ldlt.transpositionsP().transpose() * (l * d.asDiagonal() * rng.normal_vec(g.dim()));
  return post.mean + noise;
}

McEstimate mc_value_oracle(const GmmSpec& g, const LinearReward& r, double t,
                           const Eigen::VectorXd& z, int n_rollouts, Rng& rng) {
  if (n_rollouts < 1)
    throw std::invalid_argument("gmm::mc_value_oracle: n_rollouts must be >= 1");
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n_rollouts; ++i) {
    const double ri = r(sample_posterior(g, t, z, rng));
    s += ri;
    s2 += ri * ri;
  }
  McEstimate est;
  est.n = n_rollouts;
  est.mean = s / n_rollouts;
  const double var = std::max(s2 / n_rollouts - est.mean * est.mean, 0.0);
  est.stderr_of_mean = n_rollouts > 1 ? std::sqrt(var / (n_rollouts - 1)) : 0.0;
  return est;
}

McEstimate mc_value_oracle(const RolloutFn& rollout,
                           const std::function<double(const Eigen::VectorXd&)>& reward,
                           double t, const Eigen::VectorXd& z, int n_rollouts,
                           Rng& rng) {
  if (n_rollouts < 1)
    throw std::invalid_argument("gmm::mc_value_oracle: n_rollouts must be >= 1");
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n_rollouts; ++i) {
    const double ri = reward(rollout(z, t, rng));
    s += ri;
    s2 += ri * ri;
  }
  McEstimate est;
  est.n = n_rollouts;
  est.mean = s / n_rollouts;
  const double var = std::max(s2 / n_rollouts - est.mean * est.mean, 0.0);
  est.stderr_of_mean = n_rollouts > 1 ? std::sqrt(var / (n_rollouts - 1)) : 0.0;
  return est;
}

}  // namespace valstitch::gmm

#include "valstitch/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace valstitch::stats {

MeanStderr mean_stderr(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_stderr: empty sample");
  MeanStderr out;
  out.n = static_cast<int>(xs.size());
  out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / out.n;
  if (out.n > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    out.stderr_of_mean = std::sqrt(ss / (out.n - 1) / out.n);
  }
  return out;
}

double w1_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("w1_1d: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // Integrate |F_a - F_b| over the merged support.
  size_t ia = 0, ib = 0;
  double prev = std::min(a[0], b[0]);
  double dist = 0.0;
  while (ia < a.size() || ib < b.size()) {
    const double xa = ia < a.size() ? a[ia] : std::numeric_limits<double>::infinity();
    const double xb = ib < b.size() ? b[ib] : std::numeric_limits<double>::infinity();
    const double x = std::min(xa, xb);
    const double fa = double(ia) / a.size();
    const double fb = double(ib) / b.size();
    dist += std::abs(fa - fb) * (x - prev);
    prev = x;
    if (xa <= xb)
      ++ia;
    else
      ++ib;
  }
  return dist;
}

double sliced_w1(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                 int n_projections, Rng& rng) {
  if (a.rows() != b.rows())
    throw std::invalid_argument("sliced_w1: dimension mismatch");
  if (a.cols() == 0 || b.cols() == 0)
    throw std::invalid_argument("sliced_w1: empty sample set");
  if (n_projections < 1)
    throw std::invalid_argument("sliced_w1: need at least one projection");
  const Eigen::Index d = a.rows();
  double total = 0.0;
  for (int p = 0; p < n_projections; ++p) {
    Eigen::VectorXd dir = rng.normal_vec(d);
    const double norm = dir.norm();
    if (norm == 0.0) {
      --p;
      continue;
    }
    dir /= norm;
    Eigen::RowVectorXd pa = dir.transpose() * a;
    Eigen::RowVectorXd pb = dir.transpose() * b;
    total += w1_1d(std::vector<double>(pa.data(), pa.data() + pa.size()),
                   std::vector<double>(pb.data(), pb.data() + pb.size()));
  }
  return total / n_projections;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

namespace {

double ln_gamma(double x) { return std::lgamma(x); }

// Continued fraction for the incomplete beta (Lentz's method).
double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-14;
  constexpr double kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double reg_incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) +
                          a * std::log(x) + b * std::log(1.0 - x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double reg_lower_gamma(double s, double x) {
  if (x < 0.0 || s <= 0.0) throw std::invalid_argument("reg_lower_gamma: bad args");
  if (x == 0.0) return 0.0;
  if (x < s + 1.0) {
    // series
    double sum = 1.0 / s, term = sum, ap = s;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      term *= x / ap;
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + s * std::log(x) - ln_gamma(s));
  }
  // continued fraction for Q, then P = 1 - Q
  double b = x + 1.0 - s, c = 1e300, d = 1.0 / b, h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -i * (i - s);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  const double q = std::exp(-x + s * std::log(x) - ln_gamma(s)) * h;
  return 1.0 - q;
}

double student_t_cdf(double t, double df) {
  if (df <= 0.0) throw std::invalid_argument("student_t_cdf: df must be positive");
  const double x = df / (df + t * t);
  const double tail = 0.5 * reg_incomplete_beta(df / 2.0, 0.5, x);
  return t >= 0.0 ? 1.0 - tail : tail;
}

double paired_t_pvalue_greater(const std::vector<double>& x,
                               const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("paired_t_pvalue_greater: need paired samples, n >= 2");
  std::vector<double> d(x.size());
  for (size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
  MeanStderr ms = mean_stderr(d);
  if (ms.stderr_of_mean == 0.0) return ms.mean > 0.0 ? 0.0 : 1.0;
  const double t = ms.mean / ms.stderr_of_mean;
  return 1.0 - student_t_cdf(t, double(ms.n - 1));
}

BootstrapCi bootstrap_mean_ci(const std::vector<double>& xs, double confidence,
                              int n_boot, Rng& rng) {
  if (xs.empty()) throw std::invalid_argument("bootstrap_mean_ci: empty sample");
  std::vector<double> boots(n_boot);
  for (int b = 0; b < n_boot; ++b) {
    double s = 0.0;
    for (size_t i = 0; i < xs.size(); ++i)
      s += xs[rng.uniform_index(xs.size())];
    boots[b] = s / xs.size();
  }
  std::sort(boots.begin(), boots.end());
  const double alpha = 1.0 - confidence;
  auto quantile = [&](double q) {
    const double pos = q * (n_boot - 1);
    const int lo = static_cast<int>(std::floor(pos));
    const int hi = std::min(lo + 1, n_boot - 1);
    const double frac = pos - lo;
    return boots[lo] * (1.0 - frac) + boots[hi] * frac;
  };
  return {quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0)};
}

namespace {

std::vector<double> ranks_with_ties(const std::vector<double>& x) {
  const size_t n = x.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return x[a] < x[b]; });
  std::vector<double> r(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * (i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman_rank_correlation(const std::vector<double>& x,
                                 const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("spearman: need paired samples, n >= 2");
  std::vector<double> rx = ranks_with_ties(x), ry = ranks_with_ties(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
  double num = 0.0, dx = 0.0, dy = 0.0;
  for (size_t i = 0; i < rx.size(); ++i) {
    num += (rx[i] - mx) * (ry[i] - my);
    dx += (rx[i] - mx) * (rx[i] - mx);
    dy += (ry[i] - my) * (ry[i] - my);
  }
  if (dx == 0.0 || dy == 0.0) return 0.0;
  return num / std::sqrt(dx * dy);
}

double chi2_gof_pvalue(const std::vector<long>& counts,
                       const std::vector<double>& probs) {
  if (counts.size() != probs.size() || counts.size() < 2)
    throw std::invalid_argument("chi2_gof_pvalue: need >= 2 categories");
  long total = 0;
  for (long c : counts) total += c;
  if (total <= 0) throw std::invalid_argument("chi2_gof_pvalue: empty counts");
  double stat = 0.0;
  for (size_t k = 0; k < counts.size(); ++k) {
    const double expect = probs[k] * total;
    if (expect <= 0.0)
      throw std::invalid_argument("chi2_gof_pvalue: zero expected count");
    stat += (counts[k] - expect) * (counts[k] - expect) / expect;
  }
  const double df = double(counts.size() - 1);
  return 1.0 - reg_lower_gamma(df / 2.0, stat / 2.0);
}

}  // namespace valstitch::stats

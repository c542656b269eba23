#pragma once

#include <Eigen/Dense>

#include <vector>

#include "valstitch/rng.hpp"

namespace valstitch::stats {

struct MeanStderr {
  double mean = 0.0;
  double stderr_of_mean = 0.0;
  int n = 0;
};

MeanStderr mean_stderr(const std::vector<double>& xs);

// Exact 1-Wasserstein distance between 1D empirical distributions (integral
// of |F_a - F_b|); handles unequal sample counts.
double w1_1d(std::vector<double> a, std::vector<double> b);

// Mean over random unit projections of the 1D W1 between projected samples.
// Inputs are one sample per column.
double sliced_w1(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                 int n_projections, Rng& rng);

double normal_cdf(double x);

// Regularized incomplete beta I_x(a, b) and lower gamma P(s, x).
double reg_incomplete_beta(double a, double b, double x);
double reg_lower_gamma(double s, double x);

// Student-t CDF with df degrees of freedom.
double student_t_cdf(double t, double df);

// One-sided paired test of H1: mean(x - y) > 0. Returns the p-value of the
// paired t statistic.
double paired_t_pvalue_greater(const std::vector<double>& x,
                               const std::vector<double>& y);

struct BootstrapCi {
  double lo = 0.0;
  double hi = 0.0;
};

// Percentile bootstrap confidence interval for the mean.
BootstrapCi bootstrap_mean_ci(const std::vector<double>& xs, double confidence,
                              int n_boot, Rng& rng);

double spearman_rank_correlation(const std::vector<double>& x,
                                 const std::vector<double>& y);

// Goodness-of-fit p-value for observed counts against expected probabilities.
double chi2_gof_pvalue(const std::vector<long>& counts,
                       const std::vector<double>& probs);

}  // namespace valstitch::stats

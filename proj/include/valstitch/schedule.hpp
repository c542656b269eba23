#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace valstitch::schedule {

// Time convention: t = 0 is the clean data distribution, t = 1 the reference
// Gaussian. The interpolation is z_t = alpha(t) z_0 + sigma(t) eps with
// alpha(t) = 1 - t, sigma(t) = t.
struct PathCoeffs {
  double alpha;
  double sigma;
  double d_alpha;
  double d_sigma;
};

// Coefficients of the conditional bridge from an anchor latent at time tau to
// a noisier latent at time t >= tau:
//   z_t = alpha_bar z_tau + sigma_bar eps,
// chosen so marginals of the forward path are preserved.
struct BridgeCoeffs {
  double alpha_bar;
  double sigma_bar;
  double d_alpha_bar;
  double d_sigma_bar;
};

inline void check_time(double t, const char* what) {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::domain_error(std::string(what) + ": t must lie in [0,1]");
}

inline PathCoeffs coeffs(double t) {
  check_time(t, "schedule::coeffs");
  return {1.0 - t, t, -1.0, 1.0};
}

// Squared diffusion coefficient nu_t^2 = 4t/(1-t) of the marginal-preserving
// sampling SDE. Diverges at t = 1: samplers must evaluate it strictly below 1
// (the integrator uses each step's lower time).
inline double sde_diffusion_sq(double t) {
  check_time(t, "schedule::sde_diffusion_sq");
  if (t == 1.0)
    throw std::domain_error("schedule::sde_diffusion_sq: singular at t = 1");
  return 4.0 * t / (1.0 - t);
}

// Drift coefficient on the value gradient in the guided SDE,
// (nu_tilde_t^2 - nu_t^2)/2 = -3t/(1-t) for this path.
inline double guidance_coeff(double t) {
  check_time(t, "schedule::guidance_coeff");
  if (t == 1.0)
    throw std::domain_error("schedule::guidance_coeff: singular at t = 1");
  return -3.0 * t / (1.0 - t);
}

inline BridgeCoeffs bridge(double t, double tau) {
  check_time(t, "schedule::bridge");
  check_time(tau, "schedule::bridge");
  if (t < tau) throw std::domain_error("schedule::bridge: requires tau <= t");
  if (tau == 1.0)
    throw std::domain_error("schedule::bridge: anchor time tau must be < 1");
  const double ab = (1.0 - t) / (1.0 - tau);
  const double sb = std::sqrt(std::max(t * t - ab * ab * tau * tau, 0.0));
  const double dab = -1.0 / (1.0 - tau);
  // d(sigma_bar)/dt = (t - alpha_bar * d_alpha_bar * tau^2) / sigma_bar; the
  // sigma_bar -> 0 limit exists but naive division underflows, hence the floor.
  const double dsb = (t - ab * dab * tau * tau) / std::max(sb, 1e-12);
  return {ab, sb, dab, dsb};
}

}  // namespace valstitch::schedule

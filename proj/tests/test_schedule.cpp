#include "valstitch/schedule.hpp"

#include <cmath>

#include "doctest.h"
#include "valstitch/rng.hpp"

namespace sched = valstitch::schedule;

TEST_CASE("path coefficients at endpoints and interior") {
  auto c0 = sched::coeffs(0.0);
  CHECK(c0.alpha == 1.0);
  CHECK(c0.sigma == 0.0);
  CHECK(c0.d_alpha == -1.0);
  CHECK(c0.d_sigma == 1.0);

  auto c = sched::coeffs(0.3);
  CHECK(c.alpha == doctest::Approx(0.7));
  CHECK(c.sigma == doctest::Approx(0.3));

  auto c1 = sched::coeffs(1.0);
  CHECK(c1.alpha == 0.0);
  CHECK(c1.sigma == 1.0);

  CHECK_THROWS_AS(sched::coeffs(-0.1), std::domain_error);
  CHECK_THROWS_AS(sched::coeffs(1.1), std::domain_error);
  CHECK_THROWS_AS(sched::coeffs(std::nan("")), std::domain_error);
}

TEST_CASE("sde diffusion squared") {
  CHECK(sched::sde_diffusion_sq(0.5) == doctest::Approx(4.0));
  CHECK(sched::sde_diffusion_sq(0.0) == 0.0);
  CHECK(sched::sde_diffusion_sq(0.25) == doctest::Approx(4.0 / 3.0));
  CHECK_THROWS_AS(sched::sde_diffusion_sq(1.0), std::domain_error);
}

TEST_CASE("guidance coefficient") {
  CHECK(sched::guidance_coeff(0.5) == doctest::Approx(-3.0));
  CHECK(sched::guidance_coeff(0.25) == doctest::Approx(-1.0));
  CHECK(sched::guidance_coeff(0.0) == 0.0);
  CHECK_THROWS_AS(sched::guidance_coeff(1.0), std::domain_error);
}

TEST_CASE("bridge coefficients") {
  auto b = sched::bridge(0.8, 0.5);
  CHECK(b.alpha_bar == doctest::Approx(0.4));
  CHECK(b.sigma_bar == doctest::Approx(std::sqrt(0.60)));

  // tau = 0 reduces to the standard forward path, bit-exactly.
  for (double t : {0.1, 0.3, 0.7, 0.99}) {
    auto f = sched::bridge(t, 0.0);
    CHECK(f.alpha_bar == 1.0 - t);
    CHECK(f.sigma_bar == t);
    CHECK(f.d_alpha_bar == -1.0);
    CHECK(f.d_sigma_bar == 1.0);
  }

  // identity bridge
  auto id = sched::bridge(0.6, 0.6);
  CHECK(id.alpha_bar == 1.0);
  CHECK(id.sigma_bar == 0.0);

  CHECK_THROWS_AS(sched::bridge(0.4, 0.5), std::domain_error);
  CHECK_THROWS_AS(sched::bridge(1.0, 1.0), std::domain_error);
}

TEST_CASE("bridge preserves forward marginals") {
  // Drawing z_tau then bridging to z_t must match drawing z_t directly:
  // mean alpha_t z0, per-coordinate variance sigma_t^2.
  valstitch::Rng rng = valstitch::Rng::stream(123, "test.bridge_marginal");
  const double z0 = 1.7;
  const double tau = 0.35, t = 0.8;
  auto ct = sched::coeffs(t);
  auto ctau = sched::coeffs(tau);
  auto b = sched::bridge(t, tau);

  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double ztau = ctau.alpha * z0 + ctau.sigma * rng.normal();
    double zt = b.alpha_bar * ztau + b.sigma_bar * rng.normal();
    s += zt;
    s2 += zt * zt;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  CHECK(std::abs(mean - ct.alpha * z0) < 0.02 * std::abs(ct.alpha * z0));
  CHECK(std::abs(var - ct.sigma * ct.sigma) < 0.02 * ct.sigma * ct.sigma);
}

TEST_CASE("diffusion and guidance magnitudes are monotone and consistent") {
  double prev_nu = -1.0, prev_g = -1.0;
  for (int k = 0; k < 100; ++k) {
    const double t = k / 100.0;
    const double nu2 = sched::sde_diffusion_sq(t);
    const double g = sched::guidance_coeff(t);
    CHECK(nu2 >= prev_nu);
    CHECK(std::abs(g) >= prev_g);
    prev_nu = nu2;
    prev_g = std::abs(g);

    // Algebraic routes agree to machine precision:
    //   nu^2 (1-t) = 4t  and  g = (nu_tilde^2 - nu^2)/2 with
    //   nu_tilde^2/2 = -t/(1-t).
    CHECK(nu2 * (1.0 - t) == doctest::Approx(4.0 * t).epsilon(1e-15));
    const double nu_tilde2 = -2.0 * t / (1.0 - t);
    CHECK(g == doctest::Approx((nu_tilde2 - nu2) / 2.0).epsilon(1e-15));
  }
}

TEST_CASE("bridge derivatives match finite differences") {
  const double h = 1e-6;
  for (double tau : {0.0, 0.2, 0.55}) {
    for (double t : {0.6, 0.8, 0.95}) {
      auto b = sched::bridge(t, tau);
      auto bp = sched::bridge(t + h, tau);
      auto bm = sched::bridge(t - h, tau);
      CHECK(b.d_alpha_bar ==
            doctest::Approx((bp.alpha_bar - bm.alpha_bar) / (2 * h)).epsilon(1e-6));
      CHECK(b.d_sigma_bar ==
            doctest::Approx((bp.sigma_bar - bm.sigma_bar) / (2 * h)).epsilon(1e-6));
    }
  }
}

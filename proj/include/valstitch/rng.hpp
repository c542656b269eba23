#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string_view>

namespace valstitch {

// Deterministic RNG. All randomness in the project flows from one root seed
// through named streams (stream = "module.operation", index), so parallel
// execution order cannot change results. Normal draws use Box-Muller on top
// of mt19937_64 rather than std::normal_distribution, whose output is not
// pinned by the standard.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Derives a child stream from (root, name, index) via an FNV-1a/splitmix
  // hash. Distinct names or indices give statistically independent streams.
  static Rng stream(std::uint64_t root, std::string_view name,
                    std::uint64_t index = 0) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix_byte = [&h](std::uint8_t b) {
      h ^= b;
      h *= 0x100000001b3ull;
    };
    for (int i = 0; i < 8; ++i) mix_byte(static_cast<std::uint8_t>(root >> (8 * i)));
    for (char c : name) mix_byte(static_cast<std::uint8_t>(c));
    for (int i = 0; i < 8; ++i) mix_byte(static_cast<std::uint8_t>(index >> (8 * i)));
    return Rng(splitmix64(h));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer uniform on {0, ..., n-1} (unbiased by rejection).
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1]: guard the log.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  Eigen::VectorXd normal_vec(Eigen::Index d) {
    Eigen::VectorXd v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = normal();
    return v;
  }

  Eigen::MatrixXd normal_mat(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
    return m;
  }

  // Draws an index with probability proportional to probs (need not be
  // normalized; all entries must be nonnegative and not all zero).
  int categorical(const Eigen::VectorXd& probs) {
    const double total = probs.sum();
    if (!(total > 0.0))
      throw std::invalid_argument("categorical: weights must have positive sum");
    double u = uniform() * total;
    for (Eigen::Index k = 0; k < probs.size(); ++k) {
      u -= probs[k];
      if (u < 0.0) return static_cast<int>(k);
    }
    return static_cast<int>(probs.size() - 1);
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace valstitch

#pragma once

// Seeded random streams and Gaussian random fields with covariance
// alpha (-Laplacian + beta I)^(-gamma) on the torus.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>

#include "oplab/grid.hpp"

namespace oplab {

/// Deterministic generator identified by (seed, stream). Distinct stream ids
/// give independent substreams; one instance must not be shared across threads.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x6f706c61u};
    engine_.seed(seq);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::uint64_t bits() { return engine_(); }

  /// Child stream derived from this stream id and `id`; does not advance *this.
  SeededRng substream(std::uint64_t id) const { return SeededRng(seed_, mix(stream_, id)); }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }
  static std::uint64_t mix(std::uint64_t parent, std::uint64_t id) { return splitmix(splitmix(parent) ^ (id + 1)); }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

struct GrfConfig {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 2.0;

  void validate() const {
    if (!(std::isfinite(alpha) && std::isfinite(beta) && std::isfinite(gamma))) {
      throw std::invalid_argument("GRF parameters must be finite");
    }
    if (alpha <= 0.0 || beta <= 0.0) throw std::invalid_argument("GRF alpha and beta must be positive");
    if (gamma <= 1.0) throw std::invalid_argument("GRF gamma must exceed 1 for a trace-class covariance");
  }

  /// Standard deviation of the Fourier coefficient at frequency nu.
  double mode_scale(int nu1, int nu2) const {
    const double k2 = 4.0 * std::numbers::pi * std::numbers::pi * (nu1 * nu1 + nu2 * nu2);
    return std::sqrt(alpha) * std::pow(k2 + beta, -gamma / 2.0);
  }
};

/// Samples a GRF from an explicit source of standard normal draws. Modes are
/// drawn on the retained set max(|nu1|,|nu2|) < N/2 in a fixed order: the zero
/// mode gets a real N(0,1) draw, every other conjugate pair gets independent
/// N(0,1/2) real and imaginary parts with Z_{-nu} = conj(Z_nu).
template <class NormalSource>
Field sample_grf(const GrfConfig& cfg, GridSpec grid, NormalSource&& draw) {
  cfg.validate();
  SpectralField s(grid);
  const int n = grid.n();
  for (int k1 = 0; k1 < n; ++k1) {
    if (k1 == grid.half()) continue;
    for (int k2 = 0; k2 < n; ++k2) {
      if (k2 == grid.half()) continue;
      const int nu1 = grid.frequency(k1);
      const int nu2 = grid.frequency(k2);
      const double scale = cfg.mode_scale(nu1, nu2);
      if (nu1 == 0 && nu2 == 0) {
        s(k1, k2) = Complex(draw() * scale, 0.0);
        continue;
      }
      const bool canonical = nu1 > 0 || (nu1 == 0 && nu2 > 0);
      if (!canonical) continue;
      const double re = draw() * std::numbers::sqrt2 / 2.0;
      const double im = draw() * std::numbers::sqrt2 / 2.0;
      const Complex z(re * scale, im * scale);
      s.at(nu1, nu2) = z;
      s.at(-nu1, -nu2) = std::conj(z);
    }
  }
  return from_spectral(s);
}

inline Field sample_grf(const GrfConfig& cfg, GridSpec grid, SeededRng& rng) {
  return sample_grf(cfg, grid, [&rng] { return rng.normal(); });
}

/// Expected squared L2 norm of a sample, sum of mode variances over the retained set.
inline double grf_expected_squared_norm(const GrfConfig& cfg, GridSpec grid) {
  double s = 0.0;
  const int h = grid.half();
  for (int nu1 = -h + 1; nu1 < h; ++nu1) {
    for (int nu2 = -h + 1; nu2 < h; ++nu2) {
      const double sc = cfg.mode_scale(nu1, nu2);
      s += sc * sc;
    }
  }
  return s;
}

}  // namespace oplab

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "oplab/grid.hpp"
#include "oplab/kernels.hpp"
#include "oplab/operators.hpp"
#include "oplab/random.hpp"

namespace oplab::testing {

// White noise on the grid; unlike GRF draws it populates the Nyquist lines too.
inline Field white_field(GridSpec grid, SeededRng& rng, double scale = 1.0) {
  Field f(grid);
  for (double& v : f.values()) v = scale * rng.normal();
  return f;
}

inline std::vector<Field> grf_fields(GridSpec grid, int count, SeededRng& rng, const GrfConfig& cfg = {}) {
  std::vector<Field> out;
  for (int i = 0; i < count; ++i) out.push_back(sample_grf(cfg, grid, rng));
  return out;
}

inline double max_abs_diff(const Field& a, const Field& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

inline std::uint64_t fnv1a(const Field& f, std::uint64_t h = 1469598103934665603ull) {
  for (double v : f.values()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int k = 0; k < 8; ++k) {
      h ^= (bits >> (8 * k)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

// Independent dense T: (1/N^2) sum over lattice images of the raw kernel,
// with a radius far beyond where the images matter.
template <class Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> dense_t_as(OutputKernelKind kind, double sigma, int n) {
  const int radius = 24;
  const Scalar s_ = sigma;
  auto base = [&](Scalar dx, Scalar dy) {
    const Scalar r2 = dx * dx + dy * dy;
    return kind == OutputKernelKind::Gaussian ? std::exp(-r2 / (2 * s_ * s_)) : std::exp(-std::sqrt(r2) / s_);
  };
  const int size = n * n;
  // The kernel depends only on the displacement, so tabulate it once per offset.
  std::vector<Scalar> table(size);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      Scalar s = 0;
      for (int m1 = -radius; m1 <= radius; ++m1) {
        for (int m2 = -radius; m2 <= radius; ++m2) s += base(Scalar(a) / n + m1, Scalar(b) / n + m2);
      }
      table[a * n + b] = s;
    }
  }
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> m(size, size);
  for (int p = 0; p < size; ++p) {
    for (int q = 0; q < size; ++q) {
      const int da = ((p / n - q / n) % n + n) % n;
      const int db = ((p % n - q % n) % n + n) % n;
      m(p, q) = table[da * n + db] / size;
    }
  }
  return m;
}

inline Eigen::MatrixXd dense_t(OutputKernelKind kind, double sigma, int n) { return dense_t_as<double>(kind, sigma, n); }

inline Eigen::VectorXd as_vector(const Field& f) {
  return Eigen::Map<const Eigen::VectorXd>(f.values().data(), static_cast<Eigen::Index>(f.values().size()));
}

inline Field as_field(GridSpec g, const Eigen::VectorXd& v) { return Field(g, std::vector<double>(v.data(), v.data() + v.size())); }

// Materialized operator system: K = [k_x(f_i, f_j) c T] blocks, nu = [k_x(f, f_i) c T],
// prediction nu K^+ U with an eigen-decomposition pseudo-inverse. A smooth k_y
// gives T eigenvalues far below double precision, so the solve runs in long double.
inline Field dense_block_blup(const HSKernel& kappa, std::span<const InContextPair> ctx, const Field& query, double c) {
  using Mat = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
  const GridSpec g = kappa.T.grid();
  const int m = static_cast<int>(g.size());
  const int n = static_cast<int>(ctx.size());
  const Mat t = static_cast<long double>(c) * dense_t_as<long double>(kappa.T.kind(), kappa.T.sigma(), g.n());
  Mat k(n * m, n * m);
  Mat nu(m, n * m);
  Vec u(n * m);
  for (int i = 0; i < n; ++i) {
    u.segment(i * m, m) = as_vector(ctx[i].u).cast<long double>();
    nu.block(0, i * m, m, m) = static_cast<long double>(kx_eval(kappa.kx, query, ctx[i].f)) * t;
    for (int j = 0; j < n; ++j) {
      k.block(i * m, j * m, m, m) = static_cast<long double>(kx_eval(kappa.kx, ctx[i].f, ctx[j].f)) * t;
    }
  }
  const Eigen::SelfAdjointEigenSolver<Mat> eig(k);
  const long double cutoff = 1e-17L * eig.eigenvalues().cwiseAbs().maxCoeff();
  Vec inv = eig.eigenvalues();
  for (Eigen::Index i = 0; i < inv.size(); ++i) inv(i) = std::abs(inv(i)) > cutoff ? 1.0L / inv(i) : 0.0L;
  const Vec w = eig.eigenvectors() * inv.asDiagonal() * (eig.eigenvectors().transpose() * u);
  const Eigen::VectorXd p = (nu * w).cast<double>();
  return as_field(g, p);
}

}  // namespace oplab::testing

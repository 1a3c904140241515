#pragma once

// Scalar input kernels k_x on fields, the output integral operator T built from
// a stationary kernel k_y on the torus, and the Hilbert-Schmidt operator-valued
// kernel kappa(f1, f2) u = k_x(f1, f2) * T u.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "oplab/grid.hpp"

namespace oplab {

enum class InputKernelKind { Linear, Laplacian, GradientRbf, Energy };
enum class OutputKernelKind { Laplace, Gaussian };

inline constexpr std::array<InputKernelKind, 4> kAllInputKernels = {
    InputKernelKind::Linear, InputKernelKind::Laplacian, InputKernelKind::GradientRbf, InputKernelKind::Energy};

inline std::string_view name(InputKernelKind k) {
  switch (k) {
    case InputKernelKind::Linear: return "linear";
    case InputKernelKind::Laplacian: return "laplacian";
    case InputKernelKind::GradientRbf: return "gradient_rbf";
    case InputKernelKind::Energy: return "energy";
  }
  return "?";
}

inline std::string_view name(OutputKernelKind k) { return k == OutputKernelKind::Laplace ? "laplace" : "gaussian"; }

inline InputKernelKind input_kernel_from_name(std::string_view s) {
  for (auto k : kAllInputKernels) {
    if (name(k) == s) return k;
  }
  throw std::invalid_argument("unknown input kernel '" + std::string(s) + "'");
}

inline OutputKernelKind output_kernel_from_name(std::string_view s) {
  if (s == "laplace") return OutputKernelKind::Laplace;
  if (s == "gaussian") return OutputKernelKind::Gaussian;
  throw std::invalid_argument("unknown output kernel '" + std::string(s) + "'");
}

struct InputKernel {
  InputKernelKind kind = InputKernelKind::Linear;
  double sigma = 1.0;  // unused by Linear

  InputKernel() = default;
  InputKernel(InputKernelKind k, double s = 1.0) : kind(k), sigma(s) {
    if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("input kernel sigma must be positive");
  }

  bool needs_gradient() const noexcept { return kind == InputKernelKind::GradientRbf; }
};

/// What k_x needs to know about one argument. Evaluating through features lets
/// Gram and attention loops reuse spectral gradients and norms.
struct KernelFeatures {
  Field value;
  std::optional<std::array<Field, 2>> gradient;
  double squared_norm = 0.0;
};

inline KernelFeatures kernel_features(const InputKernel& k, Field f) {
  KernelFeatures out{std::move(f), std::nullopt, 0.0};
  out.squared_norm = oplab::squared_norm(out.value);
  if (k.needs_gradient()) out.gradient = spectral_gradient(out.value);
  return out;
}

namespace detail {

inline double squared_distance(const Field& a, const Field& b) {
  require_same_grid(a.grid(), b.grid(), "k_x");
  const auto av = a.values();
  const auto bv = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  return s / static_cast<double>(av.size());
}

inline double gradient_squared_distance(const KernelFeatures& a, const KernelFeatures& b) {
  if (!a.gradient || !b.gradient) throw std::logic_error("gradient RBF kernel needs gradient features");
  return squared_distance((*a.gradient)[0], (*b.gradient)[0]) + squared_distance((*a.gradient)[1], (*b.gradient)[1]);
}

}  // namespace detail

inline double kx_eval(const InputKernel& k, const KernelFeatures& a, const KernelFeatures& b) {
  switch (k.kind) {
    case InputKernelKind::Linear:
      return inner_product(a.value, b.value);
    case InputKernelKind::Laplacian:
      return std::exp(-std::sqrt(detail::squared_distance(a.value, b.value)) / k.sigma);
    case InputKernelKind::GradientRbf:
      return std::exp(-detail::gradient_squared_distance(a, b) / (2.0 * k.sigma * k.sigma));
    case InputKernelKind::Energy: {
      const double e = a.squared_norm - b.squared_norm;
      return std::exp(-e * e / (2.0 * k.sigma * k.sigma));
    }
  }
  return 0.0;
}

inline double kx_eval(const InputKernel& k, const Field& f, const Field& g) {
  return kx_eval(k, kernel_features(k, f), kernel_features(k, g));
}

/// Accumulates L2 gradients of a scalar objective with respect to the field
/// behind one KernelFeatures. Gradient-RBF contributions are collected as a
/// vector field and mapped back through grad^* once in finish().
class FeatureAdjoint {
 public:
  explicit FeatureAdjoint(GridSpec grid) : value_(grid) {}

  Field& value() noexcept { return value_; }

  std::array<Field, 2>& vector_part() {
    if (!vector_) vector_.emplace(std::array<Field, 2>{Field(value_.grid()), Field(value_.grid())});
    return *vector_;
  }

  Field finish() const {
    Field out = value_;
    if (vector_) out += gradient_normal_operator(*vector_);
    return out;
  }

 private:
  Field value_;
  std::optional<std::array<Field, 2>> vector_;
};

/// Adds dk * (d k_x(a,b)/da) to adj_a and dk * (d k_x(a,b)/db) to adj_b, where
/// kval = k_x(a, b). Laplacian derivative is taken as 0 when ||a - b|| < 1e-9.
inline void accumulate_kx_pullback(const InputKernel& k, const KernelFeatures& a, const KernelFeatures& b, double kval,
                                   double dk, FeatureAdjoint& adj_a, FeatureAdjoint& adj_b) {
  if (dk == 0.0) return;
  switch (k.kind) {
    case InputKernelKind::Linear:
      adj_a.value().axpy(dk, b.value);
      adj_b.value().axpy(dk, a.value);
      return;
    case InputKernelKind::Laplacian: {
      const double dist = std::sqrt(detail::squared_distance(a.value, b.value));
      if (dist < 1e-9) return;
      const double w = -dk * kval / (k.sigma * dist);
      adj_a.value().axpy(w, a.value).axpy(-w, b.value);
      adj_b.value().axpy(-w, a.value).axpy(w, b.value);
      return;
    }
    case InputKernelKind::GradientRbf: {
      const double w = -dk * kval / (k.sigma * k.sigma);
      auto& va = adj_a.vector_part();
      auto& vb = adj_b.vector_part();
      for (int axis = 0; axis < 2; ++axis) {
        va[axis].axpy(w, (*a.gradient)[axis]).axpy(-w, (*b.gradient)[axis]);
        vb[axis].axpy(-w, (*a.gradient)[axis]).axpy(w, (*b.gradient)[axis]);
      }
      return;
    }
    case InputKernelKind::Energy: {
      const double e = a.squared_norm - b.squared_norm;
      const double w = -dk * kval * e / (k.sigma * k.sigma);
      adj_a.value().axpy(2.0 * w, a.value);
      adj_b.value().axpy(-2.0 * w, b.value);
      return;
    }
  }
}

/// Scalar Gram matrix G_ij = k_x(A_i, B_j).
inline Eigen::MatrixXd gram_x(const InputKernel& k, std::span<const KernelFeatures> a,
                              std::span<const KernelFeatures> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("gram_x: empty field list");
  Eigen::MatrixXd g(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) g(i, j) = kx_eval(k, a[i], b[j]);
  }
  return g;
}

inline std::vector<KernelFeatures> kernel_features(const InputKernel& k, std::span<const Field> fields) {
  std::vector<KernelFeatures> out;
  out.reserve(fields.size());
  for (const Field& f : fields) out.push_back(kernel_features(k, f));
  return out;
}

inline Eigen::MatrixXd gram_x(const InputKernel& k, std::span<const Field> a, std::span<const Field> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("gram_x: empty field list");
  const auto fa = kernel_features(k, a);
  const auto fb = kernel_features(k, b);
  return gram_x(k, std::span<const KernelFeatures>(fa), std::span<const KernelFeatures>(fb));
}

/// T u (y) = integral k_y(y', y) u(y') dy' on the torus, discretized with weight
/// 1/N^2. k_y is periodized by summing over integer lattice images, which keeps
/// T circulant and its symbol nonnegative.
class OutputOperator {
 public:
  OutputOperator(OutputKernelKind kind, double sigma, GridSpec grid) : kind_(kind), sigma_(sigma), grid_(grid) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("output kernel sigma must be positive");
    auto data = std::make_shared<Precomputed>(Precomputed{Field(grid), std::vector<double>(grid.size())});
    const int n = grid.n();
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) data->stencil(a, b) = periodic_kernel(static_cast<double>(a) / n, static_cast<double>(b) / n);
    }
    const SpectralField s = to_spectral(data->stencil);
    // The exact symbol is >= 0; FFT roundoff can leave entries near -1e-17.
    for (std::size_t i = 0; i < grid.size(); ++i) data->symbol[i] = std::max(0.0, s.coeffs()[i].real());
    data_ = std::move(data);
  }

  OutputKernelKind kind() const noexcept { return kind_; }
  double sigma() const noexcept { return sigma_; }
  const GridSpec& grid() const noexcept { return grid_; }

  /// Raw stationary kernel as a function of displacement.
  double base_kernel(double dx, double dy) const {
    const double r2 = dx * dx + dy * dy;
    return kind_ == OutputKernelKind::Gaussian ? std::exp(-r2 / (2.0 * sigma_ * sigma_)) : std::exp(-std::sqrt(r2) / sigma_);
  }

  /// Lattice-summed kernel at displacement (dx, dy).
  double periodic_kernel(double dx, double dy) const {
    const int m = image_radius();
    double s = 0.0;
    for (int m1 = -m; m1 <= m; ++m1) {
      for (int m2 = -m; m2 <= m; ++m2) s += base_kernel(dx + m1, dy + m2);
    }
    return s;
  }

  /// Circulant generator k_y(y, 0) on the grid.
  const Field& stencil() const noexcept { return data_->stencil; }

  /// Eigenvalue of T on the Fourier mode at FFT index (k1, k2).
  double symbol(int k1, int k2) const { return data_->symbol[static_cast<std::size_t>(k1) * grid_.n() + k2]; }
  std::span<const double> symbols() const noexcept { return data_->symbol; }

  double max_symbol() const { return *std::max_element(data_->symbol.begin(), data_->symbol.end()); }
  double min_symbol() const { return *std::min_element(data_->symbol.begin(), data_->symbol.end()); }

  SpectralField apply(const SpectralField& u) const {
    require_same_grid(grid_, u.grid(), "T apply");
    SpectralField out(grid_);
    auto o = out.coeffs();
    auto in = u.coeffs();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = data_->symbol[i] * in[i];
    return out;
  }

  Field apply(const Field& u) const {
    require_same_grid(grid_, u.grid(), "T apply");
    return from_spectral(apply(to_spectral(u)));
  }

  /// Dense N^2 x N^2 matrix (1/N^2)[k_y(y_a, y_b)], evaluated pointwise; test oracle only.
  Eigen::MatrixXd dense_matrix() const {
    const int n = grid_.n();
    const auto size = static_cast<Eigen::Index>(grid_.size());
    Eigen::MatrixXd m(size, size);
    for (Eigen::Index p = 0; p < size; ++p) {
      const double x1 = static_cast<double>(p / n) / n;
      const double x2 = static_cast<double>(p % n) / n;
      for (Eigen::Index q = 0; q < size; ++q) {
        const double y1 = static_cast<double>(q / n) / n;
        const double y2 = static_cast<double>(q % n) / n;
        m(p, q) = periodic_kernel(x1 - y1, x2 - y2) / static_cast<double>(size);
      }
    }
    return m;
  }

 private:
  struct Precomputed {
    Field stencil;
    std::vector<double> symbol;
  };

  // Images beyond this lattice radius contribute < 1e-17 relative.
  int image_radius() const {
    const double reach = kind_ == OutputKernelKind::Gaussian ? sigma_ * std::sqrt(2.0 * 17.0 * std::log(10.0))
                                                             : sigma_ * 17.0 * std::log(10.0);
    return static_cast<int>(std::ceil(reach)) + 1;
  }

  OutputKernelKind kind_;
  double sigma_;
  GridSpec grid_;
  std::shared_ptr<const Precomputed> data_;
};

struct HSKernel {
  InputKernel kx;
  OutputOperator T;
};

inline Field ky_apply(const OutputOperator& t, const Field& u) { return t.apply(u); }

inline Field hs_apply(const HSKernel& kappa, const Field& f1, const Field& f2, const Field& u) {
  require_same_grid(f1.grid(), u.grid(), "hs_apply");
  Field out = kappa.T.apply(u);
  out *= kx_eval(kappa.kx, f1, f2);
  return out;
}

}  // namespace oplab

#pragma once

// Discretized L2 fields on the unit 2-torus [0,1)^2, their Fourier
// representation, and the spectral operators built on it (derivatives,
// magnitude-indexed Fourier multipliers).

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace oplab {

using Complex = std::complex<double>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GridSpec {
 public:
  explicit GridSpec(int n) : n_(n) {
    if (n < 4 || n % 2 != 0) {
      throw ShapeError("grid size must be even and >= 4, got " + std::to_string(n));
    }
  }

  int n() const noexcept { return n_; }
  int half() const noexcept { return n_ / 2; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(n_) * n_; }
  double spacing() const noexcept { return 1.0 / n_; }

  /// Signed frequency stored at FFT index k; the Nyquist index maps to +N/2.
  int frequency(int k) const noexcept { return k <= n_ / 2 ? k : k - n_; }
  /// Magnitude |nu| at FFT index k.
  int magnitude(int k) const noexcept { return std::min(k, n_ - k); }
  int index_of(int nu) const noexcept { return ((nu % n_) + n_) % n_; }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;

 private:
  int n_;
};

inline void require_same_grid(const GridSpec& a, const GridSpec& b, const char* what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": grid mismatch (" + std::to_string(a.n()) + " vs " +
                     std::to_string(b.n()) + ")");
  }
}

/// Real scalar field sampled at (a/N, b/N), stored row-major with a as the row.
class Field {
 public:
  explicit Field(GridSpec grid) : grid_(grid), values_(grid.size(), 0.0) {}

  Field(GridSpec grid, std::vector<double> values) : grid_(grid), values_(std::move(values)) {
    if (values_.size() != grid_.size()) {
      throw ShapeError("field value count " + std::to_string(values_.size()) + " does not match " +
                       std::to_string(grid_.n()) + "x" + std::to_string(grid_.n()));
    }
    if (!all_finite()) throw std::invalid_argument("field values must be finite");
  }

  static Field constant(GridSpec grid, double c) {
    Field f(grid);
    std::fill(f.values_.begin(), f.values_.end(), c);
    return f;
  }

  /// Samples fn(x1, x2) on the grid points.
  template <class Fn>
  static Field sample(GridSpec grid, Fn&& fn) {
    Field f(grid);
    const int n = grid.n();
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) f(a, b) = fn(static_cast<double>(a) / n, static_cast<double>(b) / n);
    }
    return f;
  }

  const GridSpec& grid() const noexcept { return grid_; }
  int n() const noexcept { return grid_.n(); }

  double operator()(int a, int b) const { return values_[static_cast<std::size_t>(a) * grid_.n() + b]; }
  double& operator()(int a, int b) { return values_[static_cast<std::size_t>(a) * grid_.n() + b]; }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  Field& operator+=(const Field& o) {
    require_same_grid(grid_, o.grid_, "field +=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  Field& operator-=(const Field& o) {
    require_same_grid(grid_, o.grid_, "field -=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  Field& operator*=(double s) {
    for (double& v : values_) v *= s;
    return *this;
  }
  /// this += s * o
  Field& axpy(double s, const Field& o) {
    require_same_grid(grid_, o.grid_, "field axpy");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += s * o.values_[i];
    return *this;
  }

  friend Field operator+(Field a, const Field& b) { return a += b; }
  friend Field operator-(Field a, const Field& b) { return a -= b; }
  friend Field operator*(double s, Field a) { return a *= s; }
  friend Field operator-(Field a) { return a *= -1.0; }

  friend bool operator==(const Field&, const Field&) = default;

 private:
  GridSpec grid_;
  std::vector<double> values_;
};

/// (1/N^2) * sum f*g, the exact L2 inner product for band-limited integrands.
inline double inner_product(const Field& f, const Field& g) {
  require_same_grid(f.grid(), g.grid(), "inner_product");
  const auto fv = f.values();
  const auto gv = g.values();
  double s = 0.0;
  for (std::size_t i = 0; i < fv.size(); ++i) s += fv[i] * gv[i];
  return s / static_cast<double>(fv.size());
}

inline double squared_norm(const Field& f) { return inner_product(f, f); }
inline double norm(const Field& f) { return std::sqrt(squared_norm(f)); }

inline double sup_norm(const Field& f) {
  double m = 0.0;
  for (double v : f.values()) m = std::max(m, std::abs(v));
  return m;
}

/// Fourier coefficients in the basis exp(2 pi i nu.x), stored in FFT index order.
/// Normalized so that <f,g> = sum_nu f_nu conj(g_nu).
class SpectralField {
 public:
  explicit SpectralField(GridSpec grid) : grid_(grid), coeffs_(grid.size(), Complex{0.0, 0.0}) {}

  const GridSpec& grid() const noexcept { return grid_; }
  int n() const noexcept { return grid_.n(); }

  /// Access by FFT index.
  Complex operator()(int k1, int k2) const { return coeffs_[static_cast<std::size_t>(k1) * grid_.n() + k2]; }
  Complex& operator()(int k1, int k2) { return coeffs_[static_cast<std::size_t>(k1) * grid_.n() + k2]; }

  /// Access by signed frequency, |nu_i| <= N/2.
  Complex at(int nu1, int nu2) const { return (*this)(grid_.index_of(nu1), grid_.index_of(nu2)); }
  Complex& at(int nu1, int nu2) { return (*this)(grid_.index_of(nu1), grid_.index_of(nu2)); }

  std::span<const Complex> coeffs() const noexcept { return coeffs_; }
  std::span<Complex> coeffs() noexcept { return coeffs_; }

 private:
  GridSpec grid_;
  std::vector<Complex> coeffs_;
};

/// sum_nu f_nu conj(g_nu), real part.
inline double spectral_inner_product(const SpectralField& f, const SpectralField& g) {
  require_same_grid(f.grid(), g.grid(), "spectral_inner_product");
  double s = 0.0;
  const auto fc = f.coeffs();
  const auto gc = g.coeffs();
  for (std::size_t i = 0; i < fc.size(); ++i) s += (fc[i] * std::conj(gc[i])).real();
  return s;
}

namespace detail {

struct FftwDeleter {
  void operator()(fftw_complex* p) const noexcept { fftw_free(p); }
};
using FftwBuffer = std::unique_ptr<fftw_complex[], FftwDeleter>;

inline FftwBuffer fftw_buffer(std::size_t count) { return FftwBuffer(fftw_alloc_complex(count)); }

/// Process-wide FFTW plan cache. Planning is serialized; executing a cached
/// plan on fresh aligned buffers (fftw_execute_dft) is thread-safe.
class FftPlanCache {
 public:
  static fftw_plan get(int n, int sign) {
    static FftPlanCache cache;
    std::lock_guard lock(cache.mutex_);
    auto key = std::make_pair(n, sign);
    auto it = cache.plans_.find(key);
    if (it != cache.plans_.end()) return it->second;
    auto in = fftw_buffer(static_cast<std::size_t>(n) * n);
    auto out = fftw_buffer(static_cast<std::size_t>(n) * n);
    fftw_plan p = fftw_plan_dft_2d(n, n, in.get(), out.get(), sign, FFTW_ESTIMATE);
    cache.plans_.emplace(key, p);
    return p;
  }

  FftPlanCache(const FftPlanCache&) = delete;
  FftPlanCache& operator=(const FftPlanCache&) = delete;

 private:
  FftPlanCache() = default;
  ~FftPlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

  std::mutex mutex_;
  std::map<std::pair<int, int>, fftw_plan> plans_;
};

inline std::vector<Complex> inverse_complex(const SpectralField& s) {
  const int n = s.n();
  const std::size_t size = s.grid().size();
  auto in = fftw_buffer(size);
  auto out = fftw_buffer(size);
  std::memcpy(in.get(), s.coeffs().data(), size * sizeof(fftw_complex));
  fftw_execute_dft(FftPlanCache::get(n, FFTW_BACKWARD), in.get(), out.get());
  std::vector<Complex> result(size);
  std::memcpy(static_cast<void*>(result.data()), out.get(), size * sizeof(fftw_complex));
  return result;
}

}  // namespace detail

inline SpectralField to_spectral(const Field& f) {
  const GridSpec& g = f.grid();
  const std::size_t size = g.size();
  auto in = detail::fftw_buffer(size);
  auto out = detail::fftw_buffer(size);
  const auto v = f.values();
  for (std::size_t i = 0; i < size; ++i) {
    in[i][0] = v[i];
    in[i][1] = 0.0;
  }
  fftw_execute_dft(detail::FftPlanCache::get(g.n(), FFTW_FORWARD), in.get(), out.get());
  SpectralField s(g);
  const double scale = 1.0 / static_cast<double>(size);
  auto c = s.coeffs();
  for (std::size_t i = 0; i < size; ++i) c[i] = Complex(out[i][0] * scale, out[i][1] * scale);
  return s;
}

/// Inverse transform; the imaginary residue (zero for Hermitian spectra) is dropped.
inline Field from_spectral(const SpectralField& s) {
  auto values = detail::inverse_complex(s);
  Field f(s.grid());
  auto out = f.values();
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i].real();
  return f;
}

/// Largest |imag| of the inverse transform, i.e. how far s is from a real field.
inline double imaginary_residue(const SpectralField& s) {
  double m = 0.0;
  for (const Complex& z : detail::inverse_complex(s)) m = std::max(m, std::abs(z.imag()));
  return m;
}

/// Partial derivative along axis 0 (x1) or 1 (x2) via the multiplier 2 pi i nu.
/// The Nyquist line of the differentiated axis is zeroed so the result stays real
/// and the operator stays anti-self-adjoint.
inline SpectralField spectral_derivative(const SpectralField& s, int axis) {
  const GridSpec& g = s.grid();
  const int n = g.n();
  SpectralField d(g);
  for (int k1 = 0; k1 < n; ++k1) {
    for (int k2 = 0; k2 < n; ++k2) {
      const int k = axis == 0 ? k1 : k2;
      if (k == g.half()) continue;
      d(k1, k2) = Complex(0.0, 2.0 * std::numbers::pi * g.frequency(k)) * s(k1, k2);
    }
  }
  return d;
}

inline std::array<Field, 2> spectral_gradient(const Field& f) {
  const SpectralField s = to_spectral(f);
  return {from_spectral(spectral_derivative(s, 0)), from_spectral(spectral_derivative(s, 1))};
}

/// -sum_i d_i (d_i f): the L2 adjoint of the gradient applied to a vector field
/// is -div, so this is grad^* grad f (nonnegative, Nyquist-consistent).
inline Field gradient_normal_operator(const std::array<Field, 2>& v) {
  const GridSpec& g = v[0].grid();
  SpectralField acc(g);
  for (int axis = 0; axis < 2; ++axis) {
    const SpectralField d = spectral_derivative(to_spectral(v[axis]), axis);
    auto a = acc.coeffs();
    auto dc = d.coeffs();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] -= dc[i];
  }
  return from_spectral(acc);
}

/// Real Fourier multiplier on the retained modes max(|nu1|,|nu2|) < N/2, stored as
/// an (N/2)x(N/2) block indexed by (|nu1|, |nu2|) and mirrored to conjugate modes.
/// Modes on a Nyquist line are mapped to zero.
class SpectralMultiplier {
 public:
  explicit SpectralMultiplier(GridSpec grid, double fill = 0.0)
      : grid_(grid), weights_(static_cast<std::size_t>(grid.half()) * grid.half(), fill) {}

  SpectralMultiplier(GridSpec grid, std::vector<double> weights) : grid_(grid), weights_(std::move(weights)) {
    if (weights_.size() != static_cast<std::size_t>(grid.half()) * grid.half()) {
      throw ShapeError("multiplier must hold (N/2)x(N/2) weights");
    }
  }

  static SpectralMultiplier ones(GridSpec grid) { return SpectralMultiplier(grid, 1.0); }
  static SpectralMultiplier zeros(GridSpec grid) { return SpectralMultiplier(grid, 0.0); }

  const GridSpec& grid() const noexcept { return grid_; }
  int block() const noexcept { return grid_.half(); }

  double operator()(int m1, int m2) const { return weights_[static_cast<std::size_t>(m1) * block() + m2]; }
  double& operator()(int m1, int m2) { return weights_[static_cast<std::size_t>(m1) * block() + m2]; }

  std::span<const double> values() const noexcept { return weights_; }
  std::span<double> values() noexcept { return weights_; }

  /// Weight applied at FFT index (k1, k2); zero on Nyquist lines.
  double symbol(int k1, int k2) const {
    if (k1 == grid_.half() || k2 == grid_.half()) return 0.0;
    return (*this)(grid_.magnitude(k1), grid_.magnitude(k2));
  }

  double frobenius_dot(const SpectralMultiplier& o) const {
    require_same_grid(grid_, o.grid_, "frobenius_dot");
    double s = 0.0;
    for (std::size_t i = 0; i < weights_.size(); ++i) s += weights_[i] * o.weights_[i];
    return s;
  }
  double frobenius_norm() const { return std::sqrt(frobenius_dot(*this)); }

  friend bool operator==(const SpectralMultiplier&, const SpectralMultiplier&) = default;

 private:
  GridSpec grid_;
  std::vector<double> weights_;
};

inline SpectralField apply_fourier_multiplier(const SpectralMultiplier& r, const SpectralField& s) {
  require_same_grid(r.grid(), s.grid(), "apply_fourier_multiplier");
  const int n = s.n();
  SpectralField out(s.grid());
  for (int k1 = 0; k1 < n; ++k1) {
    for (int k2 = 0; k2 < n; ++k2) out(k1, k2) = r.symbol(k1, k2) * s(k1, k2);
  }
  return out;
}

/// W f = F^{-1}(R . F f)
inline Field apply_fourier_multiplier(const SpectralMultiplier& r, const Field& f) {
  require_same_grid(r.grid(), f.grid(), "apply_fourier_multiplier");
  return from_spectral(apply_fourier_multiplier(r, to_spectral(f)));
}

/// Gradient of <g, W f> with respect to the multiplier weights, given the
/// spectra of f and g: entry (m1,m2) = sum over modes of that magnitude of
/// Re(conj(g_nu) f_nu).
inline void accumulate_multiplier_gradient(const SpectralField& f_hat, const SpectralField& g_hat,
                                           SpectralMultiplier& grad) {
  const GridSpec& grid = f_hat.grid();
  const int n = grid.n();
  for (int k1 = 0; k1 < n; ++k1) {
    if (k1 == grid.half()) continue;
    for (int k2 = 0; k2 < n; ++k2) {
      if (k2 == grid.half()) continue;
      grad(grid.magnitude(k1), grid.magnitude(k2)) += (std::conj(g_hat(k1, k2)) * f_hat(k1, k2)).real();
    }
  }
}

// Field dump: "CTF0", u32 N, u32 reserved, then N*N little-endian float64, row-major.

namespace detail {

template <class T>
T to_little_endian(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return v;
  }
}

template <class T>
void write_le(std::ostream& os, T v) {
  v = to_little_endian(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("field dump: unexpected end of stream");
  return to_little_endian(v);
}

}  // namespace detail

inline void write_field(std::ostream& os, const Field& f) {
  os.write("CTF0", 4);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(f.n()));
  detail::write_le<std::uint32_t>(os, 0u);
  for (double v : f.values()) detail::write_le<double>(os, v);
}

inline Field read_field(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CTF0", 4) != 0) throw std::runtime_error("field dump: bad magic");
  const auto n = detail::read_le<std::uint32_t>(is);
  (void)detail::read_le<std::uint32_t>(is);
  GridSpec grid(static_cast<int>(n));
  std::vector<double> values(grid.size());
  for (double& v : values) v = detail::read_le<double>(is);
  return Field(grid, std::move(values));
}

}  // namespace oplab

#pragma once

// Independent checks of the transformer against closed forms: step-size
// selection, equivalence with operator gradient descent, the kriging (BLUP)
// predictor computed by a direct solve and by the Neumann/transformer route,
// and the invariance of the attention nonlinearity under spectral rotations.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "oplab/attention.hpp"
#include "oplab/grid.hpp"
#include "oplab/kernels.hpp"
#include "oplab/operators.hpp"
#include "oplab/random.hpp"

namespace oplab {

struct PowerIterationResult {
  double eigenvalue;  // Rayleigh quotient of the dominant eigenvector
  int iterations;
};

/// Dominant eigenvalue of a symmetric matrix by power iteration from the
/// all-ones vector, stopping once the Rayleigh quotient changes by less than
/// tol relative.
inline PowerIterationResult power_iteration(const Eigen::MatrixXd& a, double tol = 1e-14, int max_iterations = 100000) {
  if (a.rows() != a.cols() || a.rows() == 0) throw std::invalid_argument("power_iteration: need a nonempty square matrix");
  Eigen::VectorXd x = Eigen::VectorXd::Ones(a.rows()).normalized();
  double lambda = x.dot(a * x);
  for (int it = 1; it <= max_iterations; ++it) {
    Eigen::VectorXd y = a * x;
    const double norm = y.norm();
    if (norm == 0.0) return {0.0, it};
    x = y / norm;
    const double next = x.dot(a * x);
    if (std::abs(next - lambda) <= tol * std::abs(next)) return {next, it};
    lambda = next;
  }
  return {lambda, max_iterations};
}

/// delta = 1 / (lambda_max(Gram) * lambda_max(T)), so that ||I - delta K|| <= 1
/// for K = Gram (x) T.
inline double select_delta(const HSKernel& kappa, std::span<const Field> context_inputs) {
  if (context_inputs.empty()) throw std::invalid_argument("select_delta: empty context");
  const Eigen::MatrixXd g = gram_x(kappa.kx, context_inputs, context_inputs);
  if (g.cwiseAbs().maxCoeff() == 0.0) throw std::invalid_argument("select_delta: zero Gram matrix");
  const double gram_max = std::abs(power_iteration(g).eigenvalue);
  const double t_max = kappa.T.max_symbol();
  if (!(gram_max > 0.0) || !(t_max > 0.0)) throw std::invalid_argument("select_delta: degenerate spectrum");
  return 1.0 / (gram_max * t_max);
}

inline double relative_error(const Field& approx, const Field& exact) {
  const double diff = norm(approx - exact);
  const double scale = norm(exact);
  if (scale == 0.0) return diff;
  return diff / scale;
}

struct EquivalenceConfig {
  int n = 16;
  int context = 8;
  int depth = 5;
  int test_fields = 4;
  int n_bases = 30;
  double alpha_sigma = 1.0;
  InputKernelKind data_kx = InputKernelKind::Laplacian;    // data and gradient-descent kernel
  InputKernelKind model_kx = InputKernelKind::Laplacian;   // transformer nonlinearity
  OutputKernelKind ky = OutputKernelKind::Gaussian;
  double sigma_x = 1.0;
  double sigma_y = 0.5;
  GrfConfig grf{};
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
};

struct EquivalenceReport {
  EquivalenceConfig config;
  double delta;
  std::vector<double> layer_errors;  // depth + 1 entries, max relative error over test fields

  double max_error() const { return *std::max_element(layer_errors.begin(), layer_errors.end()); }
};

/// Runs the transformer with W_q = W_k = I, r_l = -delta and operator gradient
/// descent with r'_l = delta on the same context and compares p_l with O_l f.
inline EquivalenceReport check_theorem1(const EquivalenceConfig& cfg) {
  const GridSpec grid(cfg.n);
  const OutputOperator t(cfg.ky, cfg.sigma_y, grid);
  const HSKernel data_kernel{InputKernel(cfg.data_kx, cfg.sigma_x), t};
  const HSKernel model_kernel{InputKernel(cfg.model_kx, cfg.sigma_x), t};
  SeededRng rng(cfg.seed, cfg.stream);
  const SpanOperator op = sample_span_operator(data_kernel, cfg.n_bases, cfg.alpha_sigma, cfg.grf, rng);
  std::vector<InContextPair> pairs;
  std::vector<Field> inputs;
  for (int i = 0; i < cfg.context; ++i) {
    Field f = sample_grf(cfg.grf, grid, rng);
    Field u = op.apply(f);
    inputs.push_back(f);
    pairs.push_back({std::move(f), std::move(u)});
  }
  std::vector<Field> tests;
  for (int i = 0; i < cfg.test_fields; ++i) tests.push_back(sample_grf(cfg.grf, grid, rng));

  EquivalenceReport report{cfg, select_delta(data_kernel, inputs), std::vector<double>(cfg.depth + 1, 0.0)};
  if (cfg.depth == 0) return report;

  std::vector<RepresenterOperator> iterates{gd_zero(data_kernel, inputs)};
  for (int l = 0; l < cfg.depth; ++l) iterates.push_back(gd_step(iterates.back(), pairs, report.delta));

  const auto params = TransformerParams::gradient_descent(model_kernel, cfg.depth, report.delta);
  for (const Field& f : tests) {
    const auto trace = forward(make_window(pairs, f), params, {.keep_outputs = false, .keep_attention = false});
    for (int l = 0; l <= cfg.depth; ++l) {
      const Field expected = iterates[l].apply(f);
      report.layer_errors[l] = std::max(report.layer_errors[l], relative_error(trace.predictions[l], expected));
    }
  }
  return report;
}

enum class BlupMethod { Factored, Neumann };

struct BlupResult {
  Field prediction;
  BlupMethod method;
  int iterations = 0;           // Neumann only
  double rho = 0.0;             // contraction estimate, Neumann only
  double condition_number = 0.0;
  bool ridge_applied = false;
};

/// Kriging predictor sum_ij k_x(f, f_i) [Gram^-1]_ij u_j. With kappa = k_x (x) T
/// the T factors of nu and K cancel. A ridge of 1e-10 trace/n is added when the
/// Gram condition number exceeds 1e12.
inline BlupResult blup_factored(const HSKernel& kappa, std::span<const InContextPair> context, const Field& query) {
  if (context.empty()) throw std::invalid_argument("blup_factored: empty context");
  std::vector<Field> inputs;
  for (const auto& p : context) inputs.push_back(p.f);
  const auto features = kernel_features(kappa.kx, inputs);
  Eigen::MatrixXd g = gram_x(kappa.kx, std::span<const KernelFeatures>(features), std::span<const KernelFeatures>(features));
  const auto qf = kernel_features(kappa.kx, query);
  Eigen::VectorXd k(context.size());
  for (std::size_t i = 0; i < context.size(); ++i) k(i) = kx_eval(kappa.kx, qf, features[i]);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().cwiseAbs().minCoeff();
  const double hi = eig.eigenvalues().cwiseAbs().maxCoeff();
  BlupResult result{Field(query.grid()), BlupMethod::Factored};
  result.condition_number = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  if (result.condition_number > 1e12) {
    g.diagonal().array() += 1e-10 * g.trace() / static_cast<double>(g.rows());
    result.ridge_applied = true;
  }
  Eigen::VectorXd w;
  Eigen::LLT<Eigen::MatrixXd> llt(g);
  if (llt.info() == Eigen::Success) {
    w = llt.solve(k);
  } else {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(g);
    if (!lu.isInvertible()) throw std::runtime_error("blup_factored: singular Gram matrix");
    w = lu.solve(k);
  }
  for (std::size_t j = 0; j < context.size(); ++j) result.prediction.axpy(w(j), context[j].u);
  return result;
}

/// 1 - delta * (smallest positive eigenvalue of Gram (x) T over the Fourier modes
/// where the context outputs carry at least `support` of the peak modal energy).
inline double estimate_rho(const HSKernel& kappa, std::span<const InContextPair> context, double delta,
                           double support = 1e-8) {
  std::vector<Field> inputs;
  for (const auto& p : context) inputs.push_back(p.f);
  const Eigen::MatrixXd g = gram_x(kappa.kx, inputs, inputs);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g, Eigen::EigenvaluesOnly);
  double gram_min = std::numeric_limits<double>::infinity();
  for (double v : eig.eigenvalues()) {
    if (v > 0.0) gram_min = std::min(gram_min, v);
  }
  const GridSpec grid = kappa.T.grid();
  std::vector<double> energy(grid.size(), 0.0);
  for (const auto& p : context) {
    const auto s = to_spectral(p.u);
    for (std::size_t i = 0; i < energy.size(); ++i) energy[i] += std::norm(s.coeffs()[i]);
  }
  const double peak = *std::max_element(energy.begin(), energy.end());
  double t_min = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < energy.size(); ++i) {
    const double sym = kappa.T.symbols()[i];
    if (peak > 0.0 && energy[i] >= support * peak && sym > 0.0) t_min = std::min(t_min, sym);
  }
  if (!std::isfinite(gram_min) || !std::isfinite(t_min)) return 1.0;
  return std::clamp(1.0 - delta * gram_min * t_min, 0.0, 1.0);
}

/// Smallest depth with rho^depth <= tol.
inline int predicted_depth(double rho, double tol) {
  if (rho <= 0.0) return 1;
  if (rho >= 1.0) return std::numeric_limits<int>::max();
  return std::max(1, static_cast<int>(std::ceil(std::log(tol) / std::log(rho))));
}

struct NeumannTrace {
  std::vector<Field> predictions;  // depth + 1 entries
  double rho;
};

/// Transformer predictions in the gradient-descent configuration with step
/// delta for depths 0..depth: the partial Neumann sums delta nu^T sum_k (I - delta K)^k U.
inline NeumannTrace neumann_predictions(const HSKernel& kappa, std::span<const InContextPair> context, const Field& query,
                                        double delta, int depth) {
  NeumannTrace out{{Field(query.grid())}, estimate_rho(kappa, context, delta)};
  if (depth == 0) return out;
  const auto params = TransformerParams::gradient_descent(kappa, depth, delta);
  auto trace = forward(make_window(context, query), params, {.keep_outputs = false, .keep_attention = false});
  out.predictions = std::move(trace.predictions);
  return out;
}

inline BlupResult blup_neumann(const HSKernel& kappa, std::span<const InContextPair> context, const Field& query,
                               double delta, int depth) {
  auto trace = neumann_predictions(kappa, context, query, delta, depth);
  BlupResult r{std::move(trace.predictions.back()), BlupMethod::Neumann};
  r.iterations = depth;
  r.rho = trace.rho;
  return r;
}

class ConditioningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// max_ij |k_x(S f_i, S^-1 g_j) - k_x(f_i, g_j)| for a real diagonal spectral S
/// (so S^* = S). S^-1 inverts S on the retained modes.
inline double check_assumption4(const InputKernel& kx, const SpectralMultiplier& s, std::span<const Field> first,
                                std::span<const Field> second) {
  double smallest = std::numeric_limits<double>::infinity();
  for (double v : s.values()) smallest = std::min(smallest, std::abs(v));
  if (smallest < 1e-8) throw ConditioningError("check_assumption4: multiplier symbol too close to zero");
  SpectralMultiplier inverse(s.grid());
  for (std::size_t i = 0; i < s.values().size(); ++i) inverse.values()[i] = 1.0 / s.values()[i];

  double deviation = 0.0;
  for (const Field& f : first) {
    const auto sf = kernel_features(kx, apply_fourier_multiplier(s, f));
    const auto ff = kernel_features(kx, f);
    for (const Field& g : second) {
      const double rotated = kx_eval(kx, sf, kernel_features(kx, apply_fourier_multiplier(inverse, g)));
      const double plain = kx_eval(kx, ff, kernel_features(kx, g));
      deviation = std::max(deviation, std::abs(rotated - plain));
    }
  }
  return deviation;
}

}  // namespace oplab

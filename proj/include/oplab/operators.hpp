#pragma once

// Data-generating span operators O f = sum_s alpha_s k_x(phi_s, f) T psi_s and
// the operator-RKHS gradient-descent iterate kept in representer form
// O f = sum_i k_x(f_i, f) T c_i.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "oplab/grid.hpp"
#include "oplab/kernels.hpp"
#include "oplab/random.hpp"

namespace oplab {

class DegenerateDirectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SpanTerm {
  double alpha;
  KernelFeatures phi;
  Field psi;
  Field t_psi;  // T psi, precomputed
};

class SpanOperator {
 public:
  explicit SpanOperator(HSKernel kappa) : kappa_(std::move(kappa)) {}

  void add_term(double alpha, Field phi, Field psi) {
    require_same_grid(phi.grid(), kappa_.T.grid(), "span operator term");
    require_same_grid(psi.grid(), kappa_.T.grid(), "span operator term");
    Field t_psi = kappa_.T.apply(psi);
    terms_.push_back(SpanTerm{alpha, kernel_features(kappa_.kx, std::move(phi)), std::move(psi), std::move(t_psi)});
  }

  const HSKernel& kernel() const noexcept { return kappa_; }
  std::span<const SpanTerm> terms() const noexcept { return terms_; }

  Field apply(const KernelFeatures& f) const {
    Field out(kappa_.T.grid());
    for (const SpanTerm& t : terms_) out.axpy(t.alpha * kx_eval(kappa_.kx, t.phi, f), t.t_psi);
    return out;
  }

  Field apply(const Field& f) const {
    require_same_grid(f.grid(), kappa_.T.grid(), "span_apply");
    return apply(kernel_features(kappa_.kx, f));
  }

 private:
  HSKernel kappa_;
  std::vector<SpanTerm> terms_;
};

/// Draws S terms with alpha_s ~ N(0, sigma^2) and phi_s, psi_s from the GRF,
/// in the order alpha, phi, psi per term.
inline SpanOperator sample_span_operator(const HSKernel& kappa, int count, double sigma, const GrfConfig& grf,
                                         SeededRng& rng) {
  if (count < 1) throw std::invalid_argument("span operator needs at least one term");
  SpanOperator op(kappa);
  const GridSpec grid = kappa.T.grid();
  for (int s = 0; s < count; ++s) {
    const double alpha = sigma * rng.normal();
    Field phi = sample_grf(grf, grid, rng);
    Field psi = sample_grf(grf, grid, rng);
    op.add_term(alpha, std::move(phi), std::move(psi));
  }
  return op;
}

inline Field span_apply(const SpanOperator& op, const Field& f) { return op.apply(f); }

/// Writes phi_s / psi_s as field dumps plus manifest.json into `dir`.
inline void save_span_operator(const SpanOperator& op, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["kx"] = name(op.kernel().kx.kind);
  manifest["sigma_x"] = op.kernel().kx.sigma;
  manifest["ky"] = name(op.kernel().T.kind());
  manifest["sigma_y"] = op.kernel().T.sigma();
  manifest["n"] = op.kernel().T.grid().n();
  nlohmann::json terms = nlohmann::json::array();
  for (std::size_t s = 0; s < op.terms().size(); ++s) {
    const auto& t = op.terms()[s];
    const std::string phi_name = "phi_" + std::to_string(s) + ".ctf";
    const std::string psi_name = "psi_" + std::to_string(s) + ".ctf";
    {
      std::ofstream out(dir / phi_name, std::ios::binary);
      write_field(out, t.phi.value);
    }
    {
      std::ofstream out(dir / psi_name, std::ios::binary);
      write_field(out, t.psi);
    }
    terms.push_back({{"alpha", t.alpha}, {"phi", phi_name}, {"psi", psi_name}});
  }
  manifest["terms"] = terms;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

inline SpanOperator load_span_operator(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing operator manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  const GridSpec grid(manifest.at("n").get<int>());
  HSKernel kappa{InputKernel(input_kernel_from_name(manifest.at("kx").get<std::string>()), manifest.at("sigma_x").get<double>()),
                 OutputOperator(output_kernel_from_name(manifest.at("ky").get<std::string>()),
                                manifest.at("sigma_y").get<double>(), grid)};
  SpanOperator op(kappa);
  for (const auto& t : manifest.at("terms")) {
    std::ifstream phi(dir / t.at("phi").get<std::string>(), std::ios::binary);
    std::ifstream psi(dir / t.at("psi").get<std::string>(), std::ios::binary);
    op.add_term(t.at("alpha").get<double>(), read_field(phi), read_field(psi));
  }
  return op;
}

/// O f = sum_i k_x(f_i, f) T c_i, anchored at the in-context inputs f_i.
class RepresenterOperator {
 public:
  RepresenterOperator(HSKernel kappa, std::vector<KernelFeatures> anchors, std::vector<Field> coeffs)
      : kappa_(std::move(kappa)), anchors_(std::move(anchors)), coeffs_(std::move(coeffs)) {
    if (anchors_.size() != coeffs_.size()) throw std::invalid_argument("representer: anchors/coeffs length mismatch");
  }

  const HSKernel& kernel() const noexcept { return kappa_; }
  std::span<const KernelFeatures> anchors() const noexcept { return anchors_; }
  std::span<const Field> coeffs() const noexcept { return coeffs_; }
  std::size_t size() const noexcept { return coeffs_.size(); }

  Field apply(const KernelFeatures& f) const {
    Field mix(kappa_.T.grid());
    for (std::size_t i = 0; i < coeffs_.size(); ++i) mix.axpy(kx_eval(kappa_.kx, anchors_[i], f), coeffs_[i]);
    return kappa_.T.apply(mix);
  }

  Field apply(const Field& f) const {
    require_same_grid(f.grid(), kappa_.T.grid(), "representer apply");
    return apply(kernel_features(kappa_.kx, f));
  }

  /// Squared RKHS norm sum_ij <c_i, kappa(f_i, f_j) c_j>.
  double rkhs_squared_norm() const {
    std::vector<Field> t_coeffs;
    t_coeffs.reserve(coeffs_.size());
    for (const Field& c : coeffs_) t_coeffs.push_back(kappa_.T.apply(c));
    double s = 0.0;
    for (std::size_t i = 0; i < coeffs_.size(); ++i) {
      for (std::size_t j = 0; j < coeffs_.size(); ++j) {
        s += kx_eval(kappa_.kx, anchors_[i], anchors_[j]) * inner_product(coeffs_[i], t_coeffs[j]);
      }
    }
    return s;
  }

 private:
  HSKernel kappa_;
  std::vector<KernelFeatures> anchors_;
  std::vector<Field> coeffs_;
};

struct InContextPair {
  Field f;
  Field u;
};

inline RepresenterOperator gd_zero(const HSKernel& kappa, std::span<const Field> anchors) {
  std::vector<Field> coeffs;
  coeffs.reserve(anchors.size());
  for (const Field& a : anchors) coeffs.emplace_back(a.grid());
  return RepresenterOperator(kappa, kernel_features(kappa.kx, anchors), std::move(coeffs));
}

namespace detail {

inline void require_matching_anchors(const RepresenterOperator& op, std::span<const InContextPair> data) {
  if (data.size() != op.size()) throw std::invalid_argument("gd: data size does not match operator anchors");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!(data[i].f == op.anchors()[i].value)) {
      throw std::invalid_argument("gd: data input " + std::to_string(i) + " differs from operator anchor");
    }
  }
}

inline std::vector<Field> residuals(const RepresenterOperator& op, std::span<const InContextPair> data) {
  std::vector<Field> res;
  res.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) res.push_back(data[i].u - op.apply(op.anchors()[i]));
  return res;
}

}  // namespace detail

/// O_{l+1} = O_l + r' sum_i kappa(f_i, .)(u_i - O_l f_i)
inline RepresenterOperator gd_step(const RepresenterOperator& op, std::span<const InContextPair> data, double r_prime) {
  detail::require_matching_anchors(op, data);
  const auto res = detail::residuals(op, data);
  std::vector<Field> coeffs(op.coeffs().begin(), op.coeffs().end());
  for (std::size_t i = 0; i < coeffs.size(); ++i) coeffs[i].axpy(r_prime, res[i]);
  std::vector<KernelFeatures> anchors(op.anchors().begin(), op.anchors().end());
  return RepresenterOperator(op.kernel(), std::move(anchors), std::move(coeffs));
}

/// L(O) = sum_i ||u_i - O f_i||^2
inline double empirical_loss(const RepresenterOperator& op, std::span<const InContextPair> data) {
  detail::require_matching_anchors(op, data);
  double s = 0.0;
  for (const Field& r : detail::residuals(op, data)) s += squared_norm(r);
  return s;
}

struct SteepestDirection {
  RepresenterOperator direction;
  double scale;  // c such that the direction is c * sum_i kappa(f_i, .) res_i
};

/// Unit-RKHS-norm steepest descent direction G = c sum_i kappa(f_i, .)(u_i - O f_i),
/// c = 1 / sqrt(sum_ij <res_i, kappa(f_i, f_j) res_j>).
inline SteepestDirection steepest_direction(const RepresenterOperator& op, std::span<const InContextPair> data) {
  detail::require_matching_anchors(op, data);
  auto res = detail::residuals(op, data);
  const bool all_zero = std::all_of(res.begin(), res.end(), [](const Field& r) { return sup_norm(r) == 0.0; });
  if (all_zero) throw DegenerateDirectionError("steepest_direction: all residuals are zero");
  std::vector<KernelFeatures> anchors(op.anchors().begin(), op.anchors().end());
  RepresenterOperator raw(op.kernel(), anchors, res);
  const double q = raw.rkhs_squared_norm();
  if (!(q > 0.0)) throw DegenerateDirectionError("steepest_direction: residual quadratic form is not positive");
  const double c = 1.0 / std::sqrt(q);
  for (Field& r : res) r *= c;
  return {RepresenterOperator(op.kernel(), std::move(anchors), std::move(res)), c};
}

}  // namespace oplab

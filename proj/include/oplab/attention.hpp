#pragma once

// Generalized continuum attention with a Hilbert-Schmidt kernel nonlinearity.
//
// A context window holds input fields F = [f_1..f_n, f] and output fields
// U = [u_1..u_n, 0]. Each layer leaves F unchanged and updates
//
//   U'[j] = U[j] + r * sum_{i < n} A_ji * T U[i],   A_ji = k_x(W_q f_j, W_k f_i)
//
// where W_q, W_k are Fourier multipliers and the sum skips the query column
// (the mask). The prediction after a layer is -U[n].

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "oplab/grid.hpp"
#include "oplab/kernels.hpp"
#include "oplab/operators.hpp"

namespace oplab {

struct ContextWindow {
  std::vector<Field> inputs;   // n + 1 fields, the last is the query
  std::vector<Field> outputs;  // n + 1 fields, the last starts at zero
  std::optional<Field> target;

  std::size_t context_size() const noexcept { return inputs.size() - 1; }
  const GridSpec& grid() const { return inputs.front().grid(); }

  void validate() const {
    if (inputs.size() < 2) throw std::invalid_argument("context window needs at least one pair and a query");
    if (outputs.size() != inputs.size()) throw std::invalid_argument("context window rows differ in length");
    for (const Field& f : inputs) require_same_grid(grid(), f.grid(), "context window");
    for (const Field& u : outputs) require_same_grid(grid(), u.grid(), "context window");
    if (target) require_same_grid(grid(), target->grid(), "context window target");
  }
};

/// Z_0: pairs in the first n columns, the query input and a zero output last.
inline ContextWindow make_window(std::span<const InContextPair> pairs, Field query, std::optional<Field> target = std::nullopt) {
  ContextWindow w;
  for (const auto& p : pairs) {
    w.inputs.push_back(p.f);
    w.outputs.push_back(p.u);
  }
  w.outputs.emplace_back(query.grid());
  w.inputs.push_back(std::move(query));
  w.target = std::move(target);
  w.validate();
  return w;
}

struct LayerParams {
  double r;  // W_v = [[0, 0], [0, r I]]
  SpectralMultiplier query;
  SpectralMultiplier key;

  static LayerParams identity(GridSpec grid, double r) {
    return {r, SpectralMultiplier::ones(grid), SpectralMultiplier::ones(grid)};
  }
};

struct TransformerParams {
  std::vector<LayerParams> layers;
  HSKernel kernel;

  TransformerParams(std::vector<LayerParams> l, HSKernel k) : layers(std::move(l)), kernel(std::move(k)) {
    if (layers.empty()) throw std::invalid_argument("transformer needs at least one layer");
    for (const auto& layer : layers) {
      require_same_grid(grid(), layer.query.grid(), "transformer layer");
      require_same_grid(grid(), layer.key.grid(), "transformer layer");
    }
  }

  /// W_q = W_k = I and r_l = -step for every layer: the gradient-descent configuration.
  static TransformerParams gradient_descent(HSKernel k, int depth, double step) {
    std::vector<LayerParams> layers;
    for (int l = 0; l < depth; ++l) layers.push_back(LayerParams::identity(k.T.grid(), -step));
    return TransformerParams(std::move(layers), std::move(k));
  }

  const GridSpec& grid() const noexcept { return kernel.T.grid(); }
  int depth() const noexcept { return static_cast<int>(layers.size()); }
};

/// Spectra of the window inputs, shared by every layer.
inline std::vector<SpectralField> input_spectra(const ContextWindow& w) {
  std::vector<SpectralField> out;
  out.reserve(w.inputs.size());
  for (const Field& f : w.inputs) out.push_back(to_spectral(f));
  return out;
}

inline std::vector<KernelFeatures> projected_features(const InputKernel& k, const SpectralMultiplier& m,
                                                      std::span<const SpectralField> spectra) {
  std::vector<KernelFeatures> out;
  out.reserve(spectra.size());
  for (const auto& s : spectra) out.push_back(kernel_features(k, from_spectral(apply_fourier_multiplier(m, s))));
  return out;
}

/// A_ji = k_x(q_j, k_i) for all window columns.
inline Eigen::MatrixXd attention_from_features(const InputKernel& k, std::span<const KernelFeatures> queries,
                                               std::span<const KernelFeatures> keys) {
  Eigen::MatrixXd a(queries.size(), keys.size());
  for (std::size_t j = 0; j < queries.size(); ++j) {
    for (std::size_t i = 0; i < keys.size(); ++i) a(j, i) = kx_eval(k, queries[j], keys[i]);
  }
  return a;
}

inline Eigen::MatrixXd attention_weights(const LayerParams& layer, const HSKernel& kappa, std::span<const Field> inputs) {
  std::vector<SpectralField> spectra;
  for (const Field& f : inputs) spectra.push_back(to_spectral(f));
  const auto q = projected_features(kappa.kx, layer.query, spectra);
  const auto k = projected_features(kappa.kx, layer.key, spectra);
  return attention_from_features(kappa.kx, q, k);
}

/// One masked residual update of the output row given precomputed weights.
/// Returns the values T U[i] for the context columns alongside the new row.
inline std::vector<Field> masked_update(const Eigen::MatrixXd& a, double r, const OutputOperator& t,
                                        std::span<const Field> outputs, std::vector<Field>* values_out = nullptr) {
  const std::size_t cols = outputs.size();
  const std::size_t n = cols - 1;
  std::vector<Field> values;
  values.reserve(n);
  for (std::size_t i = 0; i < n; ++i) values.push_back(t.apply(outputs[i]));
  std::vector<Field> next(outputs.begin(), outputs.end());
  if (r != 0.0) {
    for (std::size_t j = 0; j < cols; ++j) {
      Field mix(t.grid());
      for (std::size_t i = 0; i < n; ++i) mix.axpy(a(j, i), values[i]);
      next[j].axpy(r, mix);
    }
  }
  if (values_out) *values_out = std::move(values);
  return next;
}

inline std::vector<Field> layer_forward(std::span<const Field> inputs, std::span<const Field> outputs,
                                        const LayerParams& layer, const HSKernel& kappa) {
  if (inputs.size() != outputs.size() || inputs.size() < 2) throw std::invalid_argument("layer_forward: bad window shape");
  return masked_update(attention_weights(layer, kappa, inputs), layer.r, kappa.T, outputs);
}

struct ForwardTrace {
  std::vector<std::vector<Field>> outputs;   // depth + 1 rows (empty when not kept)
  std::vector<Eigen::MatrixXd> attention;    // depth matrices
  std::vector<Field> predictions;            // depth + 1 fields, p_l = -U_l[n]

  std::size_t length() const noexcept { return predictions.size(); }
};

struct ForwardOptions {
  bool keep_outputs = true;
  bool keep_attention = true;
};

inline ForwardTrace forward(const ContextWindow& window, const TransformerParams& params, ForwardOptions opts = {}) {
  window.validate();
  require_same_grid(window.grid(), params.grid(), "forward");
  const auto spectra = input_spectra(window);
  const std::size_t last = window.inputs.size() - 1;

  ForwardTrace trace;
  std::vector<Field> u = window.outputs;
  auto record = [&](const std::vector<Field>& row) {
    trace.predictions.push_back(-row[last]);
    if (opts.keep_outputs) trace.outputs.push_back(row);
  };
  record(u);
  for (const LayerParams& layer : params.layers) {
    const auto q = projected_features(params.kernel.kx, layer.query, spectra);
    const auto k = projected_features(params.kernel.kx, layer.key, spectra);
    Eigen::MatrixXd a = attention_from_features(params.kernel.kx, q, k);
    u = masked_update(a, layer.r, params.kernel.T, u);
    if (opts.keep_attention) trace.attention.push_back(std::move(a));
    record(u);
  }
  return trace;
}

/// ||slot + target||^2, the loss on the negated prediction slot.
inline double icl_loss(const Field& slot, const Field& target) {
  require_same_grid(slot.grid(), target.grid(), "icl_loss");
  return squared_norm(slot + target);
}

}  // namespace oplab

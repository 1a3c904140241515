#pragma once

// Pre-training of (r_l, R_q,l, R_k,l) on the in-context loss: dataset
// construction, a reverse pass written against the fixed layer structure,
// Adam, and the average pairwise cosine between learned multipliers.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "oplab/attention.hpp"
#include "oplab/grid.hpp"
#include "oplab/kernels.hpp"
#include "oplab/operators.hpp"
#include "oplab/random.hpp"

namespace oplab {

/// Worker count from OPLAB_THREADS (default 1).
inline unsigned thread_budget() {
  if (const char* env = std::getenv("OPLAB_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return 1;
}

/// Runs body(i) for i in [0, count) on up to thread_budget() threads. Each index
/// is handled by exactly one task; callers write results into per-index slots.
inline void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body) {
  const unsigned workers = std::min<std::size_t>(thread_budget(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

enum class MultiplierInit { Uniform, NearIdentity, Normal };

inline MultiplierInit multiplier_init_from_name(std::string_view s) {
  if (s == "uniform") return MultiplierInit::Uniform;
  if (s == "near_identity") return MultiplierInit::NearIdentity;
  if (s == "normal") return MultiplierInit::Normal;
  throw std::invalid_argument("unknown multiplier init '" + std::string(s) + "'");
}

struct TrainConfig {
  int depth = 250;
  int n = 64;
  int n_prompts = 25;
  int n_bases = 30;
  int n_samples = 128;
  int epochs = 10;
  int batch_size = 0;  // 0 means the full dataset per step
  double learning_rate = 1e-3;
  double momentum = 0.0;  // recorded for completeness; Adam uses beta1/beta2
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double r_init = -0.01;
  MultiplierInit multiplier_init = MultiplierInit::NearIdentity;
  double init_scale = 1.0;  // multiplies the uniform/normal draws
  bool train_multipliers = true;
  InputKernelKind kx = InputKernelKind::Linear;
  OutputKernelKind ky = OutputKernelKind::Gaussian;
  double sigma_x = 1.0;
  double sigma_y = 0.5;
  double alpha_sigma = 1.0;
  GrfConfig grf{};
  int cosine_layers = 10;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;

  void validate() const {
    if (depth < 1 || n_prompts < 1 || n_bases < 1 || n_samples < 1 || epochs < 0 || batch_size < 0) {
      throw std::invalid_argument("train config sizes must be positive");
    }
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be nonnegative");
    (void)GridSpec(n);
    grf.validate();
  }

  HSKernel kernel() const { return HSKernel{InputKernel(kx, sigma_x), OutputOperator(ky, sigma_y, GridSpec(n))}; }
};

/// One window per sample, each with its own operator draw from substream i of rng.
inline std::vector<ContextWindow> build_dataset(const TrainConfig& cfg, const SeededRng& rng) {
  cfg.validate();
  const HSKernel kappa = cfg.kernel();
  const GridSpec grid(cfg.n);
  std::vector<ContextWindow> windows(cfg.n_samples);
  parallel_for(cfg.n_samples, [&](std::size_t i) {
    SeededRng local = rng.substream(i);
    const SpanOperator op = sample_span_operator(kappa, cfg.n_bases, cfg.alpha_sigma, cfg.grf, local);
    std::vector<InContextPair> pairs;
    for (int j = 0; j < cfg.n_prompts; ++j) {
      Field f = sample_grf(cfg.grf, grid, local);
      Field u = op.apply(f);
      pairs.push_back({std::move(f), std::move(u)});
    }
    Field query = sample_grf(cfg.grf, grid, local);
    Field target = op.apply(query);
    windows[i] = make_window(pairs, std::move(query), std::move(target));
  });
  return windows;
}

struct LayerGradient {
  double r = 0.0;
  SpectralMultiplier query;
  SpectralMultiplier key;
};

struct Gradients {
  std::vector<LayerGradient> layers;

  static Gradients zeros(const TransformerParams& p) {
    Gradients g;
    for (int l = 0; l < p.depth(); ++l) {
      g.layers.push_back({0.0, SpectralMultiplier::zeros(p.grid()), SpectralMultiplier::zeros(p.grid())});
    }
    return g;
  }

  Gradients& operator+=(const Gradients& o) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].r += o.layers[l].r;
      auto q = layers[l].query.values();
      auto k = layers[l].key.values();
      for (std::size_t i = 0; i < q.size(); ++i) {
        q[i] += o.layers[l].query.values()[i];
        k[i] += o.layers[l].key.values()[i];
      }
    }
    return *this;
  }

  Gradients& operator*=(double s) {
    for (auto& layer : layers) {
      layer.r *= s;
      for (double& v : layer.query.values()) v *= s;
      for (double& v : layer.key.values()) v *= s;
    }
    return *this;
  }

  bool all_finite() const {
    for (const auto& layer : layers) {
      if (!std::isfinite(layer.r)) return false;
      for (double v : layer.query.values()) if (!std::isfinite(v)) return false;
      for (double v : layer.key.values()) if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(std::size_t window, const std::string& what)
      : std::runtime_error("non-finite " + what + " in window " + std::to_string(window)), window_(window) {}
  std::size_t window() const noexcept { return window_; }

 private:
  std::size_t window_;
};

/// Loss ||U_L[n] + target||^2 of one window and its gradient.
inline double window_loss_and_grads(const TransformerParams& params, const ContextWindow& window, Gradients& grads) {
  if (!window.target) throw std::invalid_argument("training window has no target");
  const InputKernel& kx = params.kernel.kx;
  const OutputOperator& t = params.kernel.T;
  const GridSpec grid = params.grid();
  const std::size_t cols = window.inputs.size();
  const std::size_t n = cols - 1;
  const auto spectra = input_spectra(window);

  struct LayerCache {
    std::vector<KernelFeatures> queries;
    std::vector<KernelFeatures> keys;
    Eigen::MatrixXd a;
    std::vector<Field> values;  // T U_l[i], i < n
  };
  std::vector<LayerCache> cache;
  cache.reserve(params.layers.size());

  std::vector<Field> u = window.outputs;
  for (const LayerParams& layer : params.layers) {
    LayerCache c;
    c.queries = projected_features(kx, layer.query, spectra);
    c.keys = projected_features(kx, layer.key, spectra);
    c.a = attention_from_features(kx, c.queries, c.keys);
    u = masked_update(c.a, layer.r, t, u, &c.values);
    cache.push_back(std::move(c));
  }

  const Field residual = u[n] + *window.target;
  const double loss = squared_norm(residual);

  // Adjoint of the output row; only the query slot enters the loss.
  std::vector<Field> adj(cols, Field(grid));
  adj[n] = 2.0 * residual;

  for (int l = params.depth() - 1; l >= 0; --l) {
    const LayerParams& layer = params.layers[l];
    const LayerCache& c = cache[l];
    LayerGradient& g = grads.layers[l];

    // m(j, i) = <adj_j, T U_l[i]>
    Eigen::MatrixXd m(cols, n);
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t i = 0; i < n; ++i) m(j, i) = inner_product(adj[j], c.values[i]);
    }
    g.r += (c.a.leftCols(n).array() * m.array()).sum();

    std::vector<FeatureAdjoint> adj_q(cols, FeatureAdjoint(grid));
    std::vector<FeatureAdjoint> adj_k(cols, FeatureAdjoint(grid));
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t i = 0; i < n; ++i) {
        accumulate_kx_pullback(kx, c.queries[j], c.keys[i], c.a(j, i), layer.r * m(j, i), adj_q[j], adj_k[i]);
      }
    }
    if (layer.r != 0.0) {
      for (std::size_t j = 0; j < cols; ++j) {
        accumulate_multiplier_gradient(spectra[j], to_spectral(adj_q[j].finish()), g.query);
      }
      for (std::size_t i = 0; i < n; ++i) {
        accumulate_multiplier_gradient(spectra[i], to_spectral(adj_k[i].finish()), g.key);
      }
    }

    // adj(U_l[i]) = adj(U_{l+1}[i]) + T (r sum_j A_ji adj(U_{l+1}[j])) for context columns.
    if (layer.r != 0.0) {
      std::vector<Field> carried;
      carried.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        Field mix(grid);
        for (std::size_t j = 0; j < cols; ++j) mix.axpy(c.a(j, i), adj[j]);
        carried.push_back(t.apply(mix));
      }
      for (std::size_t i = 0; i < n; ++i) adj[i].axpy(layer.r, carried[i]);
    }
  }
  return loss;
}

namespace detail {

/// Pairwise reduction in a fixed order, independent of how items were computed.
template <class T>
T tree_reduce(std::vector<T>& items) {
  for (std::size_t stride = 1; stride < items.size(); stride *= 2) {
    for (std::size_t i = 0; i + stride < items.size(); i += 2 * stride) items[i] += items[i + stride];
  }
  return items.front();
}

struct LossAndGrads {
  double loss = 0.0;
  Gradients grads;
  LossAndGrads& operator+=(const LossAndGrads& o) {
    loss += o.loss;
    grads += o.grads;
    return *this;
  }
};

}  // namespace detail

struct LossGrad {
  double loss;
  Gradients grads;
};

/// Batch-mean loss and gradients.
inline LossGrad loss_and_grads(const TransformerParams& params, std::span<const ContextWindow> batch) {
  if (batch.empty()) throw std::invalid_argument("loss_and_grads: empty batch");
  std::vector<detail::LossAndGrads> parts(batch.size());
  parallel_for(batch.size(), [&](std::size_t w) {
    require_same_grid(batch[w].grid(), params.grid(), "loss_and_grads");
    parts[w].grads = Gradients::zeros(params);
    parts[w].loss = window_loss_and_grads(params, batch[w], parts[w].grads);
    if (!std::isfinite(parts[w].loss)) throw NonFiniteLossError(w, "loss");
    if (!parts[w].grads.all_finite()) throw NonFiniteLossError(w, "gradient");
  });
  auto total = detail::tree_reduce(parts);
  const double scale = 1.0 / static_cast<double>(batch.size());
  total.grads *= scale;
  return {total.loss * scale, std::move(total.grads)};
}

inline double batch_loss(const TransformerParams& params, std::span<const ContextWindow> batch) {
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), [&](std::size_t w) {
    const auto trace = forward(batch[w], params, {.keep_outputs = false, .keep_attention = false});
    losses[w] = icl_loss(-trace.predictions.back(), *batch[w].target);
  });
  return detail::tree_reduce(losses) / static_cast<double>(batch.size());
}

/// Parameters flattened per layer as [r, R_q..., R_k...].
inline std::vector<double> flatten(const TransformerParams& p) {
  std::vector<double> out;
  for (const auto& layer : p.layers) {
    out.push_back(layer.r);
    out.insert(out.end(), layer.query.values().begin(), layer.query.values().end());
    out.insert(out.end(), layer.key.values().begin(), layer.key.values().end());
  }
  return out;
}

inline std::vector<double> flatten(const Gradients& g) {
  std::vector<double> out;
  for (const auto& layer : g.layers) {
    out.push_back(layer.r);
    out.insert(out.end(), layer.query.values().begin(), layer.query.values().end());
    out.insert(out.end(), layer.key.values().begin(), layer.key.values().end());
  }
  return out;
}

inline void unflatten(std::span<const double> flat, TransformerParams& p) {
  std::size_t k = 0;
  for (auto& layer : p.layers) {
    layer.r = flat[k++];
    for (double& v : layer.query.values()) v = flat[k++];
    for (double& v : layer.key.values()) v = flat[k++];
  }
  if (k != flat.size()) throw std::invalid_argument("unflatten: size mismatch");
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update; entries whose mask is 0 are left alone.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg,
                      std::span<const std::uint8_t> mask = {}) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: shape mismatch");
  if (!mask.empty() && mask.size() != params.size()) throw std::invalid_argument("adam_step: mask shape mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

inline void adam_step(TransformerParams& params, const Gradients& grads, AdamState& state, const AdamConfig& cfg,
                      bool train_multipliers = true) {
  auto flat = flatten(params);
  const auto g = flatten(grads);
  std::vector<std::uint8_t> mask;
  mask.reserve(flat.size());
  for (const auto& layer : params.layers) {
    mask.push_back(1);
    mask.insert(mask.end(), layer.query.values().size() + layer.key.values().size(), train_multipliers ? 1 : 0);
  }
  adam_step(flat, g, state, cfg, mask);
  unflatten(flat, params);
}

/// Average Frobenius cosine over all ordered pairs of {R_q,l, R_k,l : l in layers},
/// self pairs included. Zero-norm multipliers are skipped with a warning.
inline double pairwise_cosine(const TransformerParams& params, std::span<const int> layers) {
  std::vector<const SpectralMultiplier*> mats;
  for (int l : layers) {
    for (const SpectralMultiplier* m : {&params.layers.at(l).query, &params.layers.at(l).key}) {
      if (m->frobenius_norm() == 0.0) {
        std::cerr << "warning: layer " << l << " has a zero-norm multiplier; excluded from cosine metric\n";
        continue;
      }
      mats.push_back(m);
    }
  }
  if (mats.empty()) throw std::invalid_argument("pairwise_cosine: no nonzero multipliers");
  std::vector<double> norms;
  for (const auto* m : mats) norms.push_back(m->frobenius_norm());
  double s = 0.0;
  for (std::size_t a = 0; a < mats.size(); ++a) {
    for (std::size_t b = 0; b < mats.size(); ++b) {
      s += std::clamp(mats[a]->frobenius_dot(*mats[b]) / (norms[a] * norms[b]), -1.0, 1.0);
    }
  }
  return std::clamp(s / static_cast<double>(mats.size() * mats.size()), -1.0, 1.0);
}

struct MetricPoint {
  long step;
  double loss;
  double cosbar;
  double wall_ms;
};

struct TrainResult {
  TransformerParams params;
  std::vector<MetricPoint> history;
  std::vector<int> cosine_layers;
  double initial_loss;  // full-dataset loss before training
  double final_loss;    // full-dataset loss after training
  double initial_cosbar;
  double final_cosbar;
};

inline TransformerParams initial_params(const TrainConfig& cfg, SeededRng rng) {
  const GridSpec grid(cfg.n);
  std::vector<LayerParams> layers;
  for (int l = 0; l < cfg.depth; ++l) {
    LayerParams layer{cfg.r_init, SpectralMultiplier(grid), SpectralMultiplier(grid)};
    for (SpectralMultiplier* m : {&layer.query, &layer.key}) {
      for (double& v : m->values()) {
        switch (cfg.multiplier_init) {
          case MultiplierInit::Uniform: v = cfg.init_scale * rng.uniform(); break;
          case MultiplierInit::NearIdentity: v = 1.0 + 0.1 * rng.normal(); break;
          case MultiplierInit::Normal: v = cfg.init_scale * rng.normal(); break;
        }
      }
    }
    layers.push_back(std::move(layer));
  }
  return TransformerParams(std::move(layers), cfg.kernel());
}

/// m' = min(cosine_layers, depth) distinct layers drawn once per run.
inline std::vector<int> sample_cosine_layers(int depth, int count, SeededRng rng) {
  std::vector<int> all(depth);
  std::iota(all.begin(), all.end(), 0);
  const int k = std::min(count, depth);
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng.bits() % static_cast<std::uint64_t>(depth - i));
    std::swap(all[i], all[j]);
  }
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

/// Streams: 0 dataset, 1 initialization, 2 cosine layer sample, 3 epoch shuffles.
inline TrainResult train(const TrainConfig& cfg, bool record_wall_time = true) {
  cfg.validate();
  const SeededRng root(cfg.seed, cfg.stream);
  const auto dataset = build_dataset(cfg, root.substream(0));
  TransformerParams params = initial_params(cfg, root.substream(1));
  const auto layers = sample_cosine_layers(cfg.depth, cfg.cosine_layers, root.substream(2));
  SeededRng shuffle_rng = root.substream(3);

  TrainResult result{params, {}, layers, 0.0, 0.0, 0.0, 0.0};
  result.initial_loss = batch_loss(params, dataset);
  result.initial_cosbar = pairwise_cosine(params, layers);

  const AdamConfig adam{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps};
  AdamState state;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  const auto start = std::chrono::steady_clock::now();
  const std::size_t batch_size = cfg.batch_size == 0 ? dataset.size() : static_cast<std::size_t>(cfg.batch_size);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (batch_size < dataset.size()) {
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[shuffle_rng.bits() % i]);
      }
    }
    for (std::size_t b = 0; b < order.size(); b += batch_size) {
      std::vector<ContextWindow> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + batch_size); ++i) batch.push_back(dataset[order[i]]);
      const double cosbar = pairwise_cosine(params, layers);
      auto lg = loss_and_grads(params, batch);
      adam_step(params, lg.grads, state, adam, cfg.train_multipliers);
      const double wall =
          record_wall_time
              ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count()
              : 0.0;
      result.history.push_back({step++, lg.loss, cosbar, wall});
    }
  }
  result.final_loss = batch_loss(params, dataset);
  result.final_cosbar = pairwise_cosine(params, layers);
  result.params = std::move(params);
  return result;
}

}  // namespace oplab

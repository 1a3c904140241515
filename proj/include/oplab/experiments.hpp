#pragma once

// Config-driven experiment runners behind the `oplab` tool. Each runner writes
// CSV (schema 1), an SVG rendered from that CSV, and report.json into the
// output directory and returns an exit status: 0 pass, 2 threshold breach.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "oplab/analysis.hpp"
#include "oplab/config.hpp"
#include "oplab/report.hpp"
#include "oplab/training.hpp"

namespace oplab {

enum class Experiment { GdCheck, IclCurves, BlupCheck, Train, AssumptionCheck };

inline const char* name(Experiment e) {
  switch (e) {
    case Experiment::GdCheck: return "gd-check";
    case Experiment::IclCurves: return "icl-curves";
    case Experiment::BlupCheck: return "blup-check";
    case Experiment::Train: return "train";
    case Experiment::AssumptionCheck: return "assumption-check";
  }
  return "?";
}

inline Experiment experiment_from_name(std::string_view s) {
  for (Experiment e : {Experiment::GdCheck, Experiment::IclCurves, Experiment::BlupCheck, Experiment::Train,
                       Experiment::AssumptionCheck}) {
    if (s == name(e)) return e;
  }
  throw ConfigError("unknown experiment '" + std::string(s) + "'");
}

inline constexpr int kExitPass = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitThreshold = 2;

struct DataKernel {
  InputKernelKind kx;
  OutputKernelKind ky;
};

inline std::string name(const DataKernel& d) { return std::string(name(d.kx)) + ":" + std::string(name(d.ky)); }

/// Any of the kernel/experiment names as an owning string.
template <class K>
std::string label(const K& k) {
  return std::string(name(k));
}

inline DataKernel data_kernel_from_name(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw ConfigError("data kernel '" + s + "' must be written kx:ky");
  return {input_kernel_from_name(s.substr(0, colon)), output_kernel_from_name(s.substr(colon + 1))};
}

struct ExperimentConfig {
  Experiment experiment = Experiment::GdCheck;
  std::uint64_t seed = 0;
  int trials = 1;
  std::filesystem::path out = "oplab-out";

  int n = 16;
  InputKernelKind kx = InputKernelKind::Laplacian;
  OutputKernelKind ky = OutputKernelKind::Gaussian;
  InputKernelKind model_kx = InputKernelKind::Laplacian;  // gd-check nonlinearity
  double sigma_x = 1.0;
  double sigma_y = 0.5;
  GrfConfig grf{};
  int context = 8;
  int n_bases = 30;
  double alpha_sigma = 1.0;
  int test_fields = 4;
  int depth = 5;

  double gd_tolerance = 1e-10;

  std::vector<DataKernel> data_kernels;
  std::vector<InputKernelKind> model_kernels;
  double monotone_slack = 1e-9;
  bool dump_predictions = true;

  int blup_max_depth = 100000;
  double blup_tolerance = 1e-3;

  TrainConfig train{};
  bool record_wall_time = false;
  double loss_drop = 0.5;
  double cosine_gain = 0.2;

  std::vector<InputKernelKind> assumption_kernels{kAllInputKernels.begin(), kAllInputKernels.end()};
  int assumption_fields = 3;
  double s_min = 0.5;
  double s_max = 2.0;
  double linear_tolerance = 1e-10;
  double laplacian_gap = 1e-3;
  double laplacian_fraction = 0.95;

  void validate() const {
    if (trials < 1) throw ConfigError("trials must be at least 1");
    if (n < 4 || n % 2) throw ConfigError("grid.n must be even and at least 4");
    if (context < 1 || n_bases < 1 || test_fields < 1 || depth < 0) throw ConfigError("sizes must be positive");
    if (!(alpha_sigma >= 0.0)) throw ConfigError("data.alpha_sigma must be nonnegative");
    if (!(sigma_x > 0.0) || !(sigma_y > 0.0)) throw ConfigError("kernel widths must be positive");
    if (!(grf.gamma > 1.0) || !(grf.alpha > 0.0) || !(grf.beta > 0.0)) {
      throw ConfigError("grf needs alpha > 0, beta > 0, gamma > 1");
    }
    if (experiment == Experiment::IclCurves && (data_kernels.empty() || model_kernels.empty())) {
      throw ConfigError("icl.data_kernels and icl.model_kernels must be nonempty");
    }
    if (experiment == Experiment::Train) {
      if (depth < 1) throw ConfigError("train needs model.depth >= 1");
      try {
        train.validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    if (experiment == Experiment::AssumptionCheck && !(s_min > 0.0 && s_max >= s_min)) {
      throw ConfigError("assumption.s_min/s_max must satisfy 0 < s_min <= s_max");
    }
  }
};

/// Defaults per experiment: desk-scale for the checks and curves, the full-size
/// training table for `train`.
inline ExperimentConfig default_config(Experiment e) {
  ExperimentConfig c;
  c.experiment = e;
  switch (e) {
    case Experiment::GdCheck:
      break;
    case Experiment::IclCurves:
      c.n = 32;
      c.context = 25;
      c.depth = 50;
      c.trials = 50;
      c.data_kernels = {{InputKernelKind::Linear, OutputKernelKind::Gaussian},
                        {InputKernelKind::Laplacian, OutputKernelKind::Gaussian},
                        {InputKernelKind::GradientRbf, OutputKernelKind::Laplace},
                        {InputKernelKind::Energy, OutputKernelKind::Laplace}};
      c.model_kernels = {kAllInputKernels.begin(), kAllInputKernels.end()};
      break;
    case Experiment::BlupCheck:
      c.n = 8;
      c.context = 4;
      break;
    case Experiment::Train:
      c.n = 64;
      c.context = 25;
      c.depth = 250;
      c.trials = 5;
      c.kx = InputKernelKind::Linear;
      break;
    case Experiment::AssumptionCheck:
      c.trials = 100;
      break;
  }
  return c;
}

namespace detail {

inline std::set<std::string> known_keys() {
  return {"experiment",         "seed",
          "trials",             "out",
          "grid.n",             "kernels.kx",
          "kernels.ky",         "kernels.model_kx",
          "kernels.sigma_x",    "kernels.sigma_y",
          "grf.alpha",          "grf.beta",
          "grf.gamma",          "data.context",
          "data.n_bases",       "data.alpha_sigma",
          "data.test_fields",   "model.depth",
          "check.tolerance",    "icl.data_kernels",
          "icl.model_kernels",  "icl.monotone_slack",
          "icl.dump_predictions", "blup.max_depth",
          "blup.tolerance",     "train.n_samples",
          "train.epochs",       "train.batch_size",
          "train.learning_rate", "train.momentum",
          "train.beta1",        "train.beta2",
          "train.eps",          "train.r_init",
          "train.init",         "train.init_scale",
          "train.train_multipliers", "train.cosine_layers",
          "train.record_wall_time", "train.loss_drop",
          "train.cosine_gain",  "assumption.kernels",
          "assumption.fields",  "assumption.s_min",
          "assumption.s_max",   "assumption.linear_tolerance",
          "assumption.laplacian_gap", "assumption.laplacian_fraction"};
}

inline int to_int(std::int64_t v, const char* key) {
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    throw ConfigError(std::string(key) + " out of range");
  }
  return static_cast<int>(v);
}

template <class F>
auto translate_names(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace detail

/// Reads an experiment file on top of default_config(experiment). A file that
/// names a different experiment is rejected.
inline ExperimentConfig load_experiment_config(const ConfigFile& file, Experiment experiment) {
  file.require_known(detail::known_keys());
  if (file.has("experiment") && experiment_from_name(file.get_string("experiment", "")) != experiment) {
    throw ConfigError("config file is for experiment '" + file.get_string("experiment", "") + "', not '" +
                      label(experiment) + "'");
  }
  ExperimentConfig c = default_config(experiment);
  const std::int64_t seed = file.get_int("seed", static_cast<std::int64_t>(c.seed));
  if (seed < 0) throw ConfigError("seed must be nonnegative");
  c.seed = static_cast<std::uint64_t>(seed);
  c.trials = detail::to_int(file.get_int("trials", c.trials), "trials");
  c.out = file.get_string("out", c.out.string());
  c.n = detail::to_int(file.get_int("grid.n", c.n), "grid.n");
  detail::translate_names([&] {
    c.kx = input_kernel_from_name(file.get_string("kernels.kx", label(c.kx)));
    c.ky = output_kernel_from_name(file.get_string("kernels.ky", label(c.ky)));
    c.model_kx = input_kernel_from_name(file.get_string("kernels.model_kx", label(c.kx)));
    if (file.has("icl.data_kernels")) {
      c.data_kernels.clear();
      for (const auto& s : file.get_strings("icl.data_kernels", {})) c.data_kernels.push_back(data_kernel_from_name(s));
    }
    if (file.has("icl.model_kernels")) {
      c.model_kernels.clear();
      for (const auto& s : file.get_strings("icl.model_kernels", {})) c.model_kernels.push_back(input_kernel_from_name(s));
    }
    if (file.has("assumption.kernels")) {
      c.assumption_kernels.clear();
      for (const auto& s : file.get_strings("assumption.kernels", {})) {
        c.assumption_kernels.push_back(input_kernel_from_name(s));
      }
    }
    c.train.multiplier_init = multiplier_init_from_name(file.get_string("train.init", "near_identity"));
    return 0;
  });
  c.sigma_x = file.get_double("kernels.sigma_x", c.sigma_x);
  c.sigma_y = file.get_double("kernels.sigma_y", c.sigma_y);
  c.grf.alpha = file.get_double("grf.alpha", c.grf.alpha);
  c.grf.beta = file.get_double("grf.beta", c.grf.beta);
  c.grf.gamma = file.get_double("grf.gamma", c.grf.gamma);
  c.context = detail::to_int(file.get_int("data.context", c.context), "data.context");
  c.n_bases = detail::to_int(file.get_int("data.n_bases", c.n_bases), "data.n_bases");
  c.alpha_sigma = file.get_double("data.alpha_sigma", c.alpha_sigma);
  c.test_fields = detail::to_int(file.get_int("data.test_fields", c.test_fields), "data.test_fields");
  c.depth = detail::to_int(file.get_int("model.depth", c.depth), "model.depth");
  c.gd_tolerance = file.get_double("check.tolerance", c.gd_tolerance);
  c.monotone_slack = file.get_double("icl.monotone_slack", c.monotone_slack);
  c.dump_predictions = file.get_bool("icl.dump_predictions", c.dump_predictions);
  c.blup_max_depth = detail::to_int(file.get_int("blup.max_depth", c.blup_max_depth), "blup.max_depth");
  c.blup_tolerance = file.get_double("blup.tolerance", c.blup_tolerance);

  TrainConfig& t = c.train;
  t.n_samples = detail::to_int(file.get_int("train.n_samples", t.n_samples), "train.n_samples");
  t.epochs = detail::to_int(file.get_int("train.epochs", t.epochs), "train.epochs");
  t.batch_size = detail::to_int(file.get_int("train.batch_size", t.batch_size), "train.batch_size");
  t.learning_rate = file.get_double("train.learning_rate", t.learning_rate);
  t.momentum = file.get_double("train.momentum", t.momentum);
  t.beta1 = file.get_double("train.beta1", t.beta1);
  t.beta2 = file.get_double("train.beta2", t.beta2);
  t.adam_eps = file.get_double("train.eps", t.adam_eps);
  t.r_init = file.get_double("train.r_init", t.r_init);
  t.init_scale = file.get_double("train.init_scale", t.init_scale);
  t.train_multipliers = file.get_bool("train.train_multipliers", t.train_multipliers);
  t.cosine_layers = detail::to_int(file.get_int("train.cosine_layers", t.cosine_layers), "train.cosine_layers");
  c.record_wall_time = file.get_bool("train.record_wall_time", c.record_wall_time);
  c.loss_drop = file.get_double("train.loss_drop", c.loss_drop);
  c.cosine_gain = file.get_double("train.cosine_gain", c.cosine_gain);

  c.assumption_fields = detail::to_int(file.get_int("assumption.fields", c.assumption_fields), "assumption.fields");
  c.s_min = file.get_double("assumption.s_min", c.s_min);
  c.s_max = file.get_double("assumption.s_max", c.s_max);
  c.linear_tolerance = file.get_double("assumption.linear_tolerance", c.linear_tolerance);
  c.laplacian_gap = file.get_double("assumption.laplacian_gap", c.laplacian_gap);
  c.laplacian_fraction = file.get_double("assumption.laplacian_fraction", c.laplacian_fraction);
  return c;
}

/// Copies the shared keys into the training config; call after any override.
inline TrainConfig training_config(const ExperimentConfig& c) {
  TrainConfig t = c.train;
  t.depth = c.depth;
  t.n = c.n;
  t.n_prompts = c.context;
  t.n_bases = c.n_bases;
  t.kx = c.kx;
  t.ky = c.ky;
  t.sigma_x = c.sigma_x;
  t.sigma_y = c.sigma_y;
  t.alpha_sigma = c.alpha_sigma;
  t.grf = c.grf;
  t.seed = c.seed;
  return t;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["experiment"] = label(c.experiment);
  j["seed"] = c.seed;
  j["trials"] = c.trials;
  j["grid"] = {{"n", c.n}};
  j["kernels"] = {{"kx", label(c.kx)}, {"ky", label(c.ky)}, {"model_kx", label(c.model_kx)},
                  {"sigma_x", c.sigma_x}, {"sigma_y", c.sigma_y}};
  j["grf"] = {{"alpha", c.grf.alpha}, {"beta", c.grf.beta}, {"gamma", c.grf.gamma}};
  j["data"] = {{"context", c.context}, {"n_bases", c.n_bases}, {"alpha_sigma", c.alpha_sigma},
               {"test_fields", c.test_fields}};
  j["model"] = {{"depth", c.depth}};
  switch (c.experiment) {
    case Experiment::GdCheck:
      j["check"] = {{"tolerance", c.gd_tolerance}};
      break;
    case Experiment::IclCurves: {
      std::vector<std::string> data, model;
      for (const auto& d : c.data_kernels) data.push_back(label(d));
      for (auto k : c.model_kernels) model.push_back(label(k));
      j["icl"] = {{"data_kernels", data}, {"model_kernels", model}, {"monotone_slack", c.monotone_slack}};
      break;
    }
    case Experiment::BlupCheck:
      j["blup"] = {{"max_depth", c.blup_max_depth}, {"tolerance", c.blup_tolerance}};
      break;
    case Experiment::Train: {
      const auto& t = c.train;
      j["train"] = {{"n_samples", t.n_samples},     {"epochs", t.epochs},         {"batch_size", t.batch_size},
                    {"learning_rate", t.learning_rate}, {"momentum", t.momentum}, {"beta1", t.beta1},
                    {"beta2", t.beta2},             {"eps", t.adam_eps},          {"r_init", t.r_init},
                    {"init_scale", t.init_scale},   {"train_multipliers", t.train_multipliers},
                    {"cosine_layers", t.cosine_layers}, {"loss_drop", c.loss_drop}, {"cosine_gain", c.cosine_gain}};
      break;
    }
    case Experiment::AssumptionCheck: {
      std::vector<std::string> kernels;
      for (auto k : c.assumption_kernels) kernels.push_back(label(k));
      j["assumption"] = {{"kernels", kernels},       {"fields", c.assumption_fields},
                         {"s_min", c.s_min},         {"s_max", c.s_max},
                         {"linear_tolerance", c.linear_tolerance}, {"laplacian_gap", c.laplacian_gap},
                         {"laplacian_fraction", c.laplacian_fraction}};
      break;
    }
  }
  return j;
}

namespace detail {

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation; 0 for a single value.
inline double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::vector<double> column_values(const CsvTable& t, const std::vector<std::size_t>& rows, const std::string& col) {
  std::vector<double> out;
  for (std::size_t r : rows) out.push_back(t.number(r, col));
  return out;
}

inline std::vector<std::size_t> rows_where(const CsvTable& t, const std::vector<std::pair<std::string, std::string>>& eq) {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    bool ok = true;
    for (const auto& [col, value] : eq) ok = ok && t.rows[r][t.column(col)] == value;
    if (ok) out.push_back(r);
  }
  return out;
}

inline std::string distinct_label(const std::string& s) {
  std::string out = s;
  std::replace(out.begin(), out.end(), ':', '_');
  return out;
}

struct IclDraw {
  std::vector<InContextPair> context;
  Field query;
  Field target;
};

inline IclDraw draw_icl_instance(const ExperimentConfig& c, const DataKernel& d, SeededRng rng) {
  const GridSpec grid(c.n);
  const HSKernel kappa{InputKernel(d.kx, c.sigma_x), OutputOperator(d.ky, c.sigma_y, grid)};
  const SpanOperator op = sample_span_operator(kappa, c.n_bases, c.alpha_sigma, c.grf, rng);
  IclDraw draw{{}, Field(grid), Field(grid)};
  for (int i = 0; i < c.context; ++i) {
    Field f = sample_grf(c.grf, grid, rng);
    Field u = op.apply(f);
    draw.context.push_back({std::move(f), std::move(u)});
  }
  draw.query = sample_grf(c.grf, grid, rng);
  draw.target = op.apply(draw.query);
  return draw;
}

}  // namespace detail

struct RunOutcome {
  int status = kExitPass;
  nlohmann::json report;
  std::vector<std::filesystem::path> files;
};

/// Transformer-vs-gradient-descent equivalence over `trials` independent contexts.
inline RunOutcome run_gd_check(const ExperimentConfig& c) {
  c.validate();
  std::vector<EquivalenceReport> reports(c.trials);
  parallel_for(c.trials, [&](std::size_t t) {
    EquivalenceConfig tc;
    tc.n = c.n;
    tc.context = c.context;
    tc.depth = c.depth;
    tc.test_fields = c.test_fields;
    tc.n_bases = c.n_bases;
    tc.alpha_sigma = c.alpha_sigma;
    tc.data_kx = c.kx;
    tc.model_kx = c.model_kx;
    tc.ky = c.ky;
    tc.sigma_x = c.sigma_x;
    tc.sigma_y = c.sigma_y;
    tc.grf = c.grf;
    tc.seed = c.seed;
    tc.stream = t;
    reports[t] = check_theorem1(tc);
  });

  CsvTable table{{"trial", "layer", "max_rel_error"}, {}};
  double worst = 0.0;
  nlohmann::json deltas = nlohmann::json::array();
  for (std::size_t t = 0; t < reports.size(); ++t) {
    deltas.push_back(reports[t].delta);
    for (std::size_t l = 0; l < reports[t].layer_errors.size(); ++l) {
      table.rows.push_back({std::to_string(t), std::to_string(l), format_number(reports[t].layer_errors[l])});
      worst = std::max(worst, reports[t].layer_errors[l]);
    }
  }
  RunOutcome out;
  const auto csv = c.out / "equivalence.csv";
  write_csv(csv, table);

  const CsvTable back = read_csv(csv);
  std::vector<PlotSeries> series;
  for (int t = 0; t < c.trials; ++t) {
    const auto rows = detail::rows_where(back, {{"trial", std::to_string(t)}});
    series.push_back({"trial " + std::to_string(t), detail::column_values(back, rows, "layer"),
                      detail::column_values(back, rows, "max_rel_error"), {}, {}});
  }
  write_text(c.out / "equivalence.svg",
             render_svg(series, {"transformer vs operator gradient descent", "layer", "max relative error", true}));

  out.status = worst <= c.gd_tolerance ? kExitPass : kExitThreshold;
  out.report = {{"config", to_json(c)}, {"delta", deltas}, {"max_error", worst}, {"tolerance", c.gd_tolerance},
                {"pass", out.status == kExitPass}};
  detail::write_json(c.out / "report.json", out.report);
  out.files = {csv, c.out / "equivalence.svg", c.out / "report.json"};
  return out;
}

struct IclCurve {
  DataKernel data;
  InputKernelKind model;
  std::vector<double> mean;  // layers 1..depth
  std::vector<double> std;
};

/// In-context loss ||p_l - target||^2 per layer for every (data kernel,
/// nonlinearity) pair; the transformer runs in the gradient-descent
/// configuration with delta chosen for the nonlinearity's kernel.
inline std::vector<IclCurve> icl_curves(const ExperimentConfig& c,
                                        std::map<std::string, std::vector<Field>>* dumps = nullptr) {
  const GridSpec grid(c.n);
  const SeededRng root(c.seed);
  std::vector<IclCurve> curves;
  for (std::size_t d = 0; d < c.data_kernels.size(); ++d) {
    const DataKernel& data = c.data_kernels[d];
    const OutputOperator t(data.ky, c.sigma_y, grid);
    // losses[m][trial][layer]
    std::vector<std::vector<std::vector<double>>> losses(
        c.model_kernels.size(), std::vector<std::vector<double>>(c.trials, std::vector<double>(c.depth, 0.0)));
    std::vector<std::vector<Field>> first_draw(c.model_kernels.size());
    detail::IclDraw first{{}, Field(grid), Field(grid)};
    parallel_for(c.trials, [&](std::size_t trial) {
      const auto draw = detail::draw_icl_instance(c, data, root.substream(d).substream(trial));
      std::vector<Field> inputs;
      for (const auto& p : draw.context) inputs.push_back(p.f);
      for (std::size_t m = 0; m < c.model_kernels.size(); ++m) {
        const HSKernel model{InputKernel(c.model_kernels[m], c.sigma_x), t};
        const double delta = select_delta(model, inputs);
        const auto trace = forward(make_window(draw.context, draw.query),
                                   TransformerParams::gradient_descent(model, c.depth, delta),
                                   {.keep_outputs = false, .keep_attention = false});
        for (int l = 1; l <= c.depth; ++l) losses[m][trial][l - 1] = squared_norm(trace.predictions[l] - draw.target);
        if (trial == 0) first_draw[m] = {trace.predictions.back()};
      }
      if (trial == 0) first = draw;
    });
    for (std::size_t m = 0; m < c.model_kernels.size(); ++m) {
      IclCurve curve{data, c.model_kernels[m], {}, {}};
      for (int l = 0; l < c.depth; ++l) {
        std::vector<double> at;
        for (int trial = 0; trial < c.trials; ++trial) at.push_back(losses[m][trial][l]);
        curve.mean.push_back(detail::mean(at));
        curve.std.push_back(detail::stddev(at));
      }
      curves.push_back(std::move(curve));
      if (dumps) {
        (*dumps)[label(data) + "/prediction_" + label(c.model_kernels[m])] = first_draw[m];
      }
    }
    if (dumps) {
      (*dumps)[label(data) + "/query"] = {first.query};
      (*dumps)[label(data) + "/target"] = {first.target};
    }
  }
  return curves;
}

struct IclVerdict {
  std::string data;
  bool has_matched = false;
  bool monotone = true;
  bool best = true;
};

/// For each data kernel whose k_x is among the nonlinearities: the matched
/// curve is non-increasing up to `slack` and has the smallest final mean loss.
inline std::vector<IclVerdict> judge_icl_curves(const std::vector<IclCurve>& curves, double slack) {
  std::map<std::string, IclVerdict> verdicts;
  std::vector<std::string> order;
  for (const auto& curve : curves) {
    const std::string key = label(curve.data);
    if (!verdicts.count(key)) {
      verdicts[key] = {key};
      order.push_back(key);
    }
  }
  for (const auto& matched : curves) {
    if (matched.model != matched.data.kx) continue;
    IclVerdict& v = verdicts[label(matched.data)];
    v.has_matched = true;
    for (std::size_t l = 1; l < matched.mean.size(); ++l) {
      if (matched.mean[l] > matched.mean[l - 1] + slack) v.monotone = false;
    }
    for (const auto& other : curves) {
      if (label(other.data) != label(matched.data) || other.model == matched.model || matched.mean.empty()) continue;
      if (matched.mean.back() > other.mean.back()) v.best = false;
    }
  }
  std::vector<IclVerdict> out;
  for (const auto& key : order) out.push_back(verdicts[key]);
  return out;
}

inline RunOutcome run_icl_curves(const ExperimentConfig& c) {
  c.validate();
  if (c.depth < 1) throw ConfigError("icl-curves needs model.depth >= 1");
  std::map<std::string, std::vector<Field>> dumps;
  const auto curves = icl_curves(c, c.dump_predictions ? &dumps : nullptr);

  CsvTable table{{"data_kernel", "model_kernel", "layer", "mean_loss", "std_loss"}, {}};
  for (const auto& curve : curves) {
    for (std::size_t l = 0; l < curve.mean.size(); ++l) {
      table.rows.push_back({label(curve.data), label(curve.model), std::to_string(l + 1), format_number(curve.mean[l]),
                            format_number(curve.std[l])});
    }
  }
  RunOutcome out;
  const auto csv = c.out / "icl_curves.csv";
  write_csv(csv, table);
  out.files.push_back(csv);

  const CsvTable back = read_csv(csv);
  for (const auto& data : c.data_kernels) {
    std::vector<PlotSeries> series;
    for (auto model : c.model_kernels) {
      const auto rows = detail::rows_where(back, {{"data_kernel", label(data)}, {"model_kernel", label(model)}});
      PlotSeries s{std::string("H: ") + label(model), detail::column_values(back, rows, "layer"),
                   detail::column_values(back, rows, "mean_loss"), {}, {}};
      const auto sd = detail::column_values(back, rows, "std_loss");
      for (std::size_t k = 0; k < s.y.size(); ++k) {
        s.lo.push_back(s.y[k] - 0.5 * sd[k]);
        s.hi.push_back(s.y[k] + 0.5 * sd[k]);
      }
      series.push_back(std::move(s));
    }
    const auto svg = c.out / ("icl_" + detail::distinct_label(label(data)) + ".svg");
    write_text(svg, render_svg(series, {"data " + label(data), "layer", "in-context loss", true}));
    out.files.push_back(svg);
  }
  for (const auto& [key, fields] : dumps) {
    const auto path = c.out / "predictions" / (detail::distinct_label(key) + ".ctf");
    std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    write_field(f, fields.front());
    out.files.push_back(path);
  }

  const auto verdicts = judge_icl_curves(curves, c.monotone_slack);
  nlohmann::json checks = nlohmann::json::array();
  bool pass = true;
  for (const auto& v : verdicts) {
    checks.push_back({{"data_kernel", v.data}, {"has_matched", v.has_matched}, {"monotone", v.monotone}, {"best", v.best}});
    if (v.has_matched) pass = pass && v.monotone && v.best;
  }
  out.status = pass ? kExitPass : kExitThreshold;
  out.report = {{"config", to_json(c)}, {"checks", checks}, {"pass", pass}};
  detail::write_json(c.out / "report.json", out.report);
  out.files.push_back(c.out / "report.json");
  return out;
}

struct BlupTrial {
  double delta = 0.0;
  double rho = 0.0;
  int predicted_depth = 0;
  int depth_run = 0;
  double condition_number = 0.0;
  bool ridge_applied = false;
  std::vector<double> errors;  // depths 0..depth_run
  bool monotone = true;
  double error_at_predicted = 0.0;
  bool reached = false;  // predicted depth within max_depth
};

inline BlupTrial blup_trial(const ExperimentConfig& c, SeededRng rng) {
  const GridSpec grid(c.n);
  const HSKernel kappa{InputKernel(c.kx, c.sigma_x), OutputOperator(c.ky, c.sigma_y, grid)};
  const SpanOperator op = sample_span_operator(kappa, c.n_bases, c.alpha_sigma, c.grf, rng);
  std::vector<InContextPair> context;
  std::vector<Field> inputs;
  for (int i = 0; i < c.context; ++i) {
    Field f = sample_grf(c.grf, grid, rng);
    Field u = op.apply(f);
    inputs.push_back(f);
    context.push_back({std::move(f), std::move(u)});
  }
  const Field query = sample_grf(c.grf, grid, rng);

  BlupTrial r;
  r.delta = select_delta(kappa, inputs);
  const BlupResult factored = blup_factored(kappa, context, query);
  r.condition_number = factored.condition_number;
  r.ridge_applied = factored.ridge_applied;
  r.rho = estimate_rho(kappa, context, r.delta);
  r.predicted_depth = predicted_depth(r.rho, c.blup_tolerance);
  r.reached = r.predicted_depth <= c.blup_max_depth;
  r.depth_run = std::min(r.predicted_depth, c.blup_max_depth);
  const auto trace = neumann_predictions(kappa, context, query, r.delta, r.depth_run);
  for (const Field& p : trace.predictions) r.errors.push_back(relative_error(p, factored.prediction));
  for (std::size_t l = 1; l < r.errors.size(); ++l) {
    if (r.errors[l] > r.errors[l - 1]) r.monotone = false;
  }
  r.error_at_predicted = r.errors.back();
  return r;
}

inline RunOutcome run_blup_check(const ExperimentConfig& c) {
  c.validate();
  std::vector<BlupTrial> trials(c.trials);
  const SeededRng root(c.seed);
  parallel_for(c.trials, [&](std::size_t t) { trials[t] = blup_trial(c, root.substream(t)); });

  CsvTable table{{"trial", "depth", "rel_error"}, {}};
  nlohmann::json per_trial = nlohmann::json::array();
  bool pass = true;
  for (std::size_t t = 0; t < trials.size(); ++t) {
    const auto& r = trials[t];
    for (std::size_t l = 0; l < r.errors.size(); ++l) {
      table.rows.push_back({std::to_string(t), std::to_string(l), format_number(r.errors[l])});
    }
    const bool ok = r.reached && r.monotone && r.error_at_predicted < c.blup_tolerance;
    pass = pass && ok;
    per_trial.push_back({{"delta", r.delta},
                         {"rho", r.rho},
                         {"predicted_depth", r.predicted_depth},
                         {"depth_run", r.depth_run},
                         {"condition_number", r.condition_number},
                         {"ridge_applied", r.ridge_applied},
                         {"monotone", r.monotone},
                         {"error_at_predicted_depth", r.error_at_predicted},
                         {"pass", ok}});
  }
  RunOutcome out;
  const auto csv = c.out / "blup.csv";
  write_csv(csv, table);
  const CsvTable back = read_csv(csv);
  std::vector<PlotSeries> series;
  for (int t = 0; t < c.trials; ++t) {
    const auto rows = detail::rows_where(back, {{"trial", std::to_string(t)}});
    series.push_back({"trial " + std::to_string(t), detail::column_values(back, rows, "depth"),
                      detail::column_values(back, rows, "rel_error"), {}, {}});
  }
  write_text(c.out / "blup.svg", render_svg(series, {"Neumann prediction vs kriging", "depth", "relative error", true}));
  out.status = pass ? kExitPass : kExitThreshold;
  out.report = {{"config", to_json(c)}, {"trials", per_trial}, {"pass", pass}};
  detail::write_json(c.out / "report.json", out.report);
  out.files = {csv, c.out / "blup.svg", c.out / "report.json"};
  return out;
}

inline RunOutcome run_train(const ExperimentConfig& c) {
  c.validate();
  std::vector<TrainResult> results;
  std::vector<double> wall(c.trials, 0.0);
  for (int t = 0; t < c.trials; ++t) {
    TrainConfig tc = training_config(c);
    tc.stream = static_cast<std::uint64_t>(t);
    const auto start = std::chrono::steady_clock::now();
    results.push_back(train(tc, c.record_wall_time));
    wall[t] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  }

  RunOutcome out;
  nlohmann::json per_trial = nlohmann::json::array();
  bool pass = true;
  for (int t = 0; t < c.trials; ++t) {
    const auto& r = results[t];
    CsvTable history{{"step", "loss", "cosbar", "wall_ms"}, {}};
    for (const auto& p : r.history) {
      history.rows.push_back({std::to_string(p.step), format_number(p.loss), format_number(p.cosbar),
                              format_number(p.wall_ms)});
    }
    const auto path = c.out / ("history_" + std::to_string(t) + ".csv");
    write_csv(path, history);
    out.files.push_back(path);
    const double drop = r.initial_loss > 0.0 ? 1.0 - r.final_loss / r.initial_loss : 0.0;
    const double gain = r.final_cosbar - r.initial_cosbar;
    const bool ok = drop >= c.loss_drop && gain >= c.cosine_gain;
    pass = pass && ok;
    per_trial.push_back({{"initial_loss", r.initial_loss},
                         {"final_loss", r.final_loss},
                         {"loss_drop", drop},
                         {"initial_cosbar", r.initial_cosbar},
                         {"final_cosbar", r.final_cosbar},
                         {"cosbar_gain", gain},
                         {"cosine_layers", r.cosine_layers},
                         {"wall_ms", wall[t]},
                         {"pass", ok}});
  }

  // Mean and standard deviation across trials, per step, from the written histories.
  std::vector<CsvTable> histories;
  for (int t = 0; t < c.trials; ++t) histories.push_back(read_csv(c.out / ("history_" + std::to_string(t) + ".csv")));
  CsvTable summary{{"step", "loss_mean", "loss_std", "cosbar_mean", "cosbar_std"}, {}};
  for (std::size_t s = 0; s < histories.front().rows.size(); ++s) {
    std::vector<double> loss, cos;
    for (const auto& h : histories) {
      loss.push_back(h.number(s, "loss"));
      cos.push_back(h.number(s, "cosbar"));
    }
    summary.rows.push_back({histories.front().rows[s][0], format_number(detail::mean(loss)),
                            format_number(detail::stddev(loss)), format_number(detail::mean(cos)),
                            format_number(detail::stddev(cos))});
  }
  const auto summary_path = c.out / "summary.csv";
  write_csv(summary_path, summary);
  out.files.push_back(summary_path);

  const CsvTable back = read_csv(summary_path);
  std::vector<std::size_t> all(back.rows.size());
  std::iota(all.begin(), all.end(), 0);
  auto band = [&](const std::string& mean_col, const std::string& std_col, const std::string& label) {
    PlotSeries s{label, detail::column_values(back, all, "step"), detail::column_values(back, all, mean_col), {}, {}};
    const auto sd = detail::column_values(back, all, std_col);
    for (std::size_t k = 0; k < s.y.size(); ++k) {
      s.lo.push_back(s.y[k] - sd[k]);
      s.hi.push_back(s.y[k] + sd[k]);
    }
    return s;
  };
  write_text(c.out / "train_loss.svg",
             render_svg({band("loss_mean", "loss_std", "loss")}, {"training loss", "step", "in-context loss", true}));
  write_text(c.out / "train_cosbar.svg", render_svg({band("cosbar_mean", "cosbar_std", "cosbar")},
                                                    {"average pairwise cosine", "step", "cosbar", false}));
  out.files.push_back(c.out / "train_loss.svg");
  out.files.push_back(c.out / "train_cosbar.svg");

  out.status = pass ? kExitPass : kExitThreshold;
  out.report = {{"config", to_json(c)}, {"trials", per_trial}, {"pass", pass}};
  detail::write_json(c.out / "report.json", out.report);
  out.files.push_back(c.out / "report.json");
  return out;
}

/// A real symbol with entries of magnitude log-uniform in [s_min, s_max] and random sign.
inline SpectralMultiplier random_invertible_multiplier(const GridSpec& grid, double s_min, double s_max, SeededRng& rng) {
  SpectralMultiplier s(grid);
  const double lo = std::log(s_min), hi = std::log(s_max);
  for (double& v : s.values()) {
    const double magnitude = std::exp(lo + (hi - lo) * rng.uniform());
    v = rng.uniform() < 0.5 ? -magnitude : magnitude;
  }
  return s;
}

struct AssumptionDraw {
  std::vector<double> deviation;  // one per configured kernel
};

inline RunOutcome run_assumption_check(const ExperimentConfig& c) {
  c.validate();
  const GridSpec grid(c.n);
  const SeededRng root(c.seed);
  std::vector<AssumptionDraw> draws(c.trials);
  parallel_for(c.trials, [&](std::size_t d) {
    SeededRng rng = root.substream(d);
    const SpectralMultiplier s = random_invertible_multiplier(grid, c.s_min, c.s_max, rng);
    std::vector<Field> first, second;
    for (int i = 0; i < c.assumption_fields; ++i) first.push_back(sample_grf(c.grf, grid, rng));
    for (int i = 0; i < c.assumption_fields; ++i) second.push_back(sample_grf(c.grf, grid, rng));
    for (auto kind : c.assumption_kernels) {
      draws[d].deviation.push_back(check_assumption4(InputKernel(kind, c.sigma_x), s, first, second));
    }
  });

  CsvTable table{{"draw", "kernel", "deviation"}, {}};
  for (std::size_t d = 0; d < draws.size(); ++d) {
    for (std::size_t k = 0; k < c.assumption_kernels.size(); ++k) {
      table.rows.push_back({std::to_string(d), label(c.assumption_kernels[k]), format_number(draws[d].deviation[k])});
    }
  }
  RunOutcome out;
  const auto csv = c.out / "assumption.csv";
  write_csv(csv, table);

  const CsvTable back = read_csv(csv);
  std::vector<PlotSeries> series;
  nlohmann::json summary = nlohmann::json::object();
  bool pass = true;
  for (auto kind : c.assumption_kernels) {
    const auto rows = detail::rows_where(back, {{"kernel", label(kind)}});
    const auto dev = detail::column_values(back, rows, "deviation");
    series.push_back({label(kind), detail::column_values(back, rows, "draw"), dev, {}, {}});
    const double worst = *std::max_element(dev.begin(), dev.end());
    const auto above = std::count_if(dev.begin(), dev.end(), [&](double v) { return v > c.laplacian_gap; });
    summary[label(kind)] = {{"max_deviation", worst}, {"draws_above_gap", above}};
    if (kind == InputKernelKind::Linear) pass = pass && worst <= c.linear_tolerance;
    if (kind == InputKernelKind::Laplacian) {
      pass = pass && static_cast<double>(above) >= c.laplacian_fraction * static_cast<double>(c.trials);
    }
  }
  write_text(c.out / "assumption.svg",
             render_svg(series, {"invariance under S* and S^-1", "draw", "max deviation", true}));
  out.status = pass ? kExitPass : kExitThreshold;
  out.report = {{"config", to_json(c)}, {"kernels", summary}, {"pass", pass}};
  detail::write_json(c.out / "report.json", out.report);
  out.files = {csv, c.out / "assumption.svg", c.out / "report.json"};
  return out;
}

inline RunOutcome run_experiment(const ExperimentConfig& c) {
  switch (c.experiment) {
    case Experiment::GdCheck: return run_gd_check(c);
    case Experiment::IclCurves: return run_icl_curves(c);
    case Experiment::BlupCheck: return run_blup_check(c);
    case Experiment::Train: return run_train(c);
    case Experiment::AssumptionCheck: return run_assumption_check(c);
  }
  throw ConfigError("unknown experiment");
}

}  // namespace oplab

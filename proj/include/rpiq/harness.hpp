#pragma once

// Desk-scale experiment harness: seeded synthetic linear models, the
// sequential layer-by-layer quantization pipeline, overhead accounting and
// GPTQ-vs-RPIQ comparison reports.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <future>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rpiq/calibration.hpp"
#include "rpiq/error.hpp"
#include "rpiq/gptq.hpp"
#include "rpiq/metrics.hpp"
#include "rpiq/model_io.hpp"
#include "rpiq/numerics.hpp"
#include "rpiq/quantgrid.hpp"
#include "rpiq/refine.hpp"

namespace rpiq {

// ---------------------------------------------------------------------------
// Synthetic models

struct Distribution {
  enum class Kind { gaussian, uniform, correlated };
  Kind kind = Kind::gaussian;
  double a = 1.0;  // gaussian: sigma; uniform: low; correlated: channel correlation rho
  double b = 0.0;  // uniform: high

  static Distribution gaussian(double sigma) { return {Kind::gaussian, sigma, 0.0}; }
  static Distribution uniform(double lo, double hi) { return {Kind::uniform, lo, hi}; }
  // Unit-variance AR(1) across channels: x_c = rho x_{c-1} + sqrt(1-rho^2) z_c.
  static Distribution correlated(double rho) { return {Kind::correlated, rho, 0.0}; }

  // "gaussian:1.0", "uniform:-1,1" or "correlated:0.5".
  static Distribution parse(const std::string& text) {
    const auto colon = text.find(':');
    const std::string kind = text.substr(0, colon);
    const std::string args = colon == std::string::npos ? "" : text.substr(colon + 1);
    try {
      if (kind == "gaussian") return gaussian(args.empty() ? 1.0 : std::stod(args));
      if (kind == "correlated") return correlated(args.empty() ? 0.5 : std::stod(args));
      if (kind == "uniform") {
        const auto comma = args.find(',');
        if (comma == std::string::npos) throw SpecError("uniform needs 'low,high'");
        return uniform(std::stod(args.substr(0, comma)), std::stod(args.substr(comma + 1)));
      }
    } catch (const std::logic_error&) {
      throw SpecError("cannot parse distribution '" + text + "'");
    }
    throw SpecError("unknown distribution '" + text + "'");
  }

  std::string str() const {
    std::ostringstream os;
    os.precision(17);
    switch (kind) {
      case Kind::gaussian: os << "gaussian:" << a; break;
      case Kind::uniform: os << "uniform:" << a << "," << b; break;
      case Kind::correlated: os << "correlated:" << a; break;
    }
    return os.str();
  }

  void validate() const {
    const bool ok = (kind == Kind::gaussian && a > 0.0) || (kind == Kind::uniform && a < b) ||
                    (kind == Kind::correlated && a > -1.0 && a < 1.0);
    if (!ok) throw SpecError("invalid distribution parameters: " + str());
  }
};

struct LayerShape {
  std::size_t out = 0;
  std::size_t in = 0;

  bool operator==(const LayerShape&) const = default;
};

// "64x64,64x32": comma separated OUTxIN pairs.
inline std::vector<LayerShape> parse_layer_shapes(const std::string& text) {
  std::vector<LayerShape> shapes;
  if (text.empty()) return shapes;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto x = item.find('x');
    try {
      if (x == std::string::npos) throw std::invalid_argument(item);
      std::size_t used = 0;
      LayerShape s;
      s.out = std::stoul(item.substr(0, x), &used);
      if (used != x) throw std::invalid_argument(item);
      s.in = std::stoul(item.substr(x + 1), &used);
      if (used != item.size() - x - 1) throw std::invalid_argument(item);
      if (s.out == 0 || s.in == 0) throw std::invalid_argument(item);
      shapes.push_back(s);
    } catch (const std::logic_error&) {
      throw SpecError("bad layer shape '" + item + "', expected OUTxIN");
    }
  }
  return shapes;
}

struct SyntheticModelSpec {
  std::vector<LayerShape> layers;
  Distribution weights = Distribution::gaussian(1.0);
  Distribution activations = Distribution::correlated(0.5);
  std::uint64_t seed = 0;
  std::size_t batches = 8;      // k
  std::size_t batch_rows = 128; // N

  void validate() const {
    weights.validate();
    activations.validate();
    if (!layers.empty() && (batches == 0 || batch_rows == 0)) {
      throw SpecError("need at least one calibration batch with at least one row");
    }
    for (std::size_t l = 1; l < layers.size(); ++l) {
      if (layers[l].in != layers[l - 1].out) {
        throw SpecError("layer " + std::to_string(l) + " expects " + std::to_string(layers[l].in) +
                        " inputs but layer " + std::to_string(l - 1) + " produces " +
                        std::to_string(layers[l - 1].out));
      }
    }
  }
};

struct SyntheticModel {
  std::vector<NamedMatrix> layers;
  std::vector<Matrix> batches;
};

namespace detail {

// Values are rounded through f32 so the in-memory model equals what a
// checkpoint round trip produces.
inline Matrix sample_matrix(std::size_t rows, std::size_t cols, const Distribution& d, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uni(d.a, d.b);
  for (std::size_t r = 0; r < rows; ++r) {
    double prev = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      double v = 0.0;
      switch (d.kind) {
        case Distribution::Kind::gaussian: v = d.a * normal(rng); break;
        case Distribution::Kind::uniform: v = uni(rng); break;
        case Distribution::Kind::correlated:
          v = c == 0 ? normal(rng) : d.a * prev + std::sqrt(1.0 - d.a * d.a) * normal(rng);
          prev = v;
          break;
      }
      m(r, c) = static_cast<double>(static_cast<float>(v));
    }
  }
  return m;
}

inline std::uint64_t activation_seed(std::uint64_t seed) { return seed * 0x9E3779B97F4A7C15ull + 0x5851F42D4C957F2Dull; }

}  // namespace detail

inline std::string layer_name(std::size_t l) { return "layer" + std::to_string(l); }

inline SyntheticModel generate_model(const SyntheticModelSpec& spec) {
  spec.validate();
  SyntheticModel model;
  std::mt19937_64 weight_rng(spec.seed);
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    model.layers.push_back(
        {layer_name(l), detail::sample_matrix(spec.layers[l].out, spec.layers[l].in, spec.weights, weight_rng)});
  }
  if (!spec.layers.empty()) {
    std::mt19937_64 act_rng(detail::activation_seed(spec.seed));
    for (std::size_t b = 0; b < spec.batches; ++b) {
      model.batches.push_back(detail::sample_matrix(spec.batch_rows, spec.layers[0].in, spec.activations, act_rng));
    }
  }
  return model;
}

// An extra instance from the same activation distribution under seed + 1,
// never seen by calibration.
inline Matrix generate_holdout(const SyntheticModelSpec& spec) {
  if (spec.layers.empty()) throw SpecError("holdout needs at least one layer");
  std::mt19937_64 rng(detail::activation_seed(spec.seed + 1));
  return detail::sample_matrix(spec.batch_rows, spec.layers[0].in, spec.activations, rng);
}

inline std::string batch_name(std::size_t b) { return "batch" + std::to_string(b); }

inline void write_model(const SyntheticModel& model, const std::filesystem::path& model_path,
                        const std::filesystem::path& calib_path) {
  save_checkpoint(model_path, model.layers);
  std::vector<NamedMatrix> batches;
  for (std::size_t b = 0; b < model.batches.size(); ++b) batches.push_back({batch_name(b), model.batches[b]});
  save_matrices(calib_path, kCalibrationKind, batches);
}

inline BatchStream in_memory_batches(const std::vector<Matrix>& batches) {
  return {batches.size(), [&batches](std::size_t b) { return batches.at(b); }};
}

// ---------------------------------------------------------------------------
// Pipeline

enum class Method { gptq, rpiq };

inline std::string to_string(Method m) { return m == Method::gptq ? "gptq" : "rpiq"; }

struct QuantizeConfig {
  Method method = Method::rpiq;
  int bits = kDefaultBits;
  std::size_t group_size = kDefaultGroupSize;
  std::size_t block_size = kDefaultBlockSize;
  double percdamp = kDefaultPercdamp;
  CurvatureSource curvature = CurvatureSource::instance;
  RefineConfig refine;
  bool sequential_propagation = true;
  bool parallel_layers = false;
  bool store_snapshot = false;

  void validate() const {
    validate_bits(bits);
    validate_alpha(refine.alpha);
    if (group_size == 0) throw ArgumentError("group_size must be positive");
    if (block_size == 0) throw ArgumentError("block_size must be positive");
    if (!(percdamp > 0.0)) throw ArgumentError("percdamp must be positive");
    if (parallel_layers && sequential_propagation) {
      throw ArgumentError("layer-parallel mode requires sequential propagation to be off");
    }
  }
};

struct LayerReport {
  std::string name;
  double gamma_stage1 = 0.0;
  double gamma_rpiq = 0.0;  // equals gamma_stage1 for gptq runs
  double reduction_pct = 0.0;
  std::size_t iterations = 0;
  bool stopped_early = false;
  RefinementTrace trace;
  std::size_t calibration_bytes = 0;  // snapshot retained after calibration
  std::size_t peak_bytes = 0;
  double stage1_seconds = 0.0;
  double stage2_seconds = 0.0;
};

struct QuantizeOutcome {
  QuantizedArtifact artifact;
  std::vector<Matrix> weights;  // dequantized, per layer
  std::vector<LayerReport> layers;
  RunCost cost;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct LayerOutcome {
  QuantizedLayer artifact;
  Matrix weights;
  LayerReport report;
};

inline LayerOutcome quantize_layer(const std::string& name, const Matrix& w_fp, const BatchStream& batches,
                                   const QuantizeConfig& cfg) {
  LayerOutcome out;
  out.report.name = name;

  const auto t0 = Clock::now();
  CalibrationStats calib_stats;
  const CalibrationSnapshot snapshot = calibrate(batches, w_fp, cfg.percdamp, &calib_stats);
  out.report.calibration_bytes = snapshot.retained_bytes();
  Stage1Result s1 = quantize_layer_stage1(w_fp, snapshot, fit_grids(w_fp, cfg.bits, cfg.group_size));
  out.report.stage1_seconds = seconds_since(t0);
  // Stage 1 holds the snapshot, H^{-1}, its Cholesky factor, the working copy
  // and the result.
  const std::size_t stage1_peak = snapshot.retained_bytes() + 2 * snapshot.h_damped.bytes() + 2 * w_fp.bytes();
  std::size_t peak = std::max(calib_stats.peak_bytes, stage1_peak);

  out.report.gamma_stage1 = s1.reconstruction_error;
  RefineResult refined;
  if (cfg.method == Method::rpiq && cfg.refine.t_max > 0) {
    const auto t1 = Clock::now();
    const BlockPartition part =
        partition(snapshot, PartitionOptions{cfg.block_size, cfg.curvature, cfg.curvature == CurvatureSource::instance
                                                                                  ? cfg.percdamp
                                                                                  : 0.0});
    std::size_t refine_peak = 0;
    refined = refine_layer(s1, snapshot, part, cfg.refine, &refine_peak);
    out.report.stage2_seconds = seconds_since(t1);
    peak = std::max(peak, snapshot.retained_bytes() + part.retained_bytes() + refine_peak + w_fp.bytes());
  } else {
    refined.w_refined = s1.w_init;
    refined.codes = s1.codes;
    refined.grid = s1.grid;
    refined.trace.gamma = {s1.reconstruction_error};
    refined.trace.gamma_projected = s1.reconstruction_error;
    refined.trace.gamma_final = s1.reconstruction_error;
  }
  out.report.peak_bytes = peak;
  out.report.gamma_rpiq = refined.trace.gamma_final;
  out.report.reduction_pct = reduction_pct(out.report.gamma_stage1, out.report.gamma_rpiq);
  out.report.iterations = refined.trace.iterations;
  out.report.stopped_early = refined.trace.stopped_early;
  out.report.trace = refined.trace;

  out.artifact.name = name;
  out.artifact.grid = refined.grid;
  out.artifact.codes = pack(refined.codes, cfg.bits);
  out.artifact.trace = {out.report.gamma_stage1, out.report.gamma_rpiq, out.report.iterations,
                        out.report.stopped_early};
  if (cfg.store_snapshot) out.artifact.snapshot = StoredSnapshot{snapshot.x_orig, snapshot.y_orig};
  out.weights = std::move(refined.w_refined);
  return out;
}

// Batch b pushed through the first `depth` layers.
inline BatchStream propagated(const BatchStream& inputs, const std::vector<const Matrix*>& prefix) {
  return {inputs.count, [inputs, prefix](std::size_t b) {
            Matrix x = inputs.fetch(b);
            for (const Matrix* w : prefix) x = matmul_transposed(x, *w);
            return x;
          }};
}

}  // namespace detail

// Quantizes every layer in order. Calibration inputs of layer l+1 are the
// outputs of the already-quantized layer l when sequential propagation is on,
// otherwise the full-precision outputs. Batches are re-streamed from `inputs`
// for every layer; nothing but the current snapshot is retained.
inline QuantizeOutcome quantize_model(const std::vector<NamedMatrix>& layers, const BatchStream& inputs,
                                      const QuantizeConfig& cfg) {
  cfg.validate();
  for (std::size_t l = 1; l < layers.size(); ++l) {
    if (layers[l].value.cols() != layers[l - 1].value.rows()) {
      throw SpecError("layer " + layers[l].name + " does not chain onto " + layers[l - 1].name);
    }
  }
  QuantizeOutcome out;
  const auto t0 = detail::Clock::now();
  std::vector<detail::LayerOutcome> results(layers.size());

  auto run_layer = [&](std::size_t l, const std::vector<const Matrix*>& prefix) {
    try {
      return detail::quantize_layer(layers[l].name, layers[l].value, detail::propagated(inputs, prefix), cfg);
    } catch (const Error& e) {
      throw Error(e.category(), "layer " + layers[l].name + ": " + e.what());
    }
  };

  if (!layers.empty() && inputs.count > 0) {
    const Matrix probe = inputs.fetch(0);
    if (probe.cols() != layers.front().value.cols()) {
      throw ShapeError("calibration batches have " + std::to_string(probe.cols()) + " columns, layer " +
                       layers.front().name + " expects " + std::to_string(layers.front().value.cols()));
    }
  }

  if (cfg.parallel_layers) {
    std::vector<std::future<detail::LayerOutcome>> futures;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::vector<const Matrix*> prefix;
      for (std::size_t j = 0; j < l; ++j) prefix.push_back(&layers[j].value);
      futures.push_back(std::async(std::launch::async, run_layer, l, prefix));
    }
    for (std::size_t l = 0; l < layers.size(); ++l) results[l] = futures[l].get();
  } else {
    std::vector<const Matrix*> prefix;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      results[l] = run_layer(l, prefix);
      prefix.push_back(cfg.sequential_propagation ? &results[l].weights : &layers[l].value);
    }
  }

  for (auto& r : results) {
    // Concurrent layers are all live at once.
    out.cost.peak_bytes =
        cfg.parallel_layers ? out.cost.peak_bytes + r.report.peak_bytes : std::max(out.cost.peak_bytes, r.report.peak_bytes);
    out.artifact.layers.push_back(std::move(r.artifact));
    out.weights.push_back(std::move(r.weights));
    out.layers.push_back(std::move(r.report));
  }
  out.cost.seconds = detail::seconds_since(t0);
  return out;
}

// Gamma on an instance never used for refinement; the instance is pushed
// through the full-precision and quantized stacks alike per the propagation
// mode, and the loss is measured on the given layer's outputs.
inline std::vector<double> holdout_losses(const std::vector<NamedMatrix>& fp_layers,
                                          const std::vector<Matrix>& quantized, const Matrix& x_holdout,
                                          bool sequential_propagation = true) {
  std::vector<double> losses;
  Matrix x = x_holdout;
  for (std::size_t l = 0; l < fp_layers.size(); ++l) {
    const Matrix y_fp = matmul_transposed(x, fp_layers[l].value);
    const Matrix y_q = matmul_transposed(x, quantized.at(l));
    losses.push_back(frobenius_sq(subtract(y_fp, y_q)));
    x = sequential_propagation ? y_q : y_fp;
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Reports

using ConfigEcho = std::vector<std::pair<std::string, std::string>>;

struct LayerComparison {
  std::string name;
  double gamma_stage1 = 0.0;
  double gamma_rpiq = 0.0;
  double reduction_pct = 0.0;
  std::size_t iterations = 0;
  bool stopped_early = false;
};

struct ComparisonReport {
  ConfigEcho config;
  std::vector<LayerComparison> layers;
  Overheads overheads;
  RunCost gptq_cost;
  RunCost rpiq_cost;
};

struct Comparison {
  QuantizeOutcome gptq;
  QuantizeOutcome rpiq;
  ComparisonReport report;
};

inline Comparison compare_methods(const std::vector<NamedMatrix>& layers, const BatchStream& inputs,
                                  QuantizeConfig cfg, ConfigEcho echo = {}) {
  Comparison c;
  cfg.method = Method::gptq;
  c.gptq = quantize_model(layers, inputs, cfg);
  cfg.method = Method::rpiq;
  c.rpiq = quantize_model(layers, inputs, cfg);
  c.report.config = std::move(echo);
  for (const auto& l : c.rpiq.layers) {
    c.report.layers.push_back({l.name, l.gamma_stage1, l.gamma_rpiq, l.reduction_pct, l.iterations, l.stopped_early});
  }
  c.report.gptq_cost = c.gptq.cost;
  c.report.rpiq_cost = c.rpiq.cost;
  c.report.overheads = measure_overheads(c.gptq.cost, c.rpiq.cost);
  return c;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void write_config_echo(std::ostream& os, const ConfigEcho& echo) {
  for (const auto& [k, v] : echo) os << "config." << k << "=" << v << "\n";
}

inline void write_layer_reports(std::ostream& os, const std::vector<LayerReport>& layers) {
  for (const auto& l : layers) {
    const std::string p = "layer." + l.name + ".";
    os << p << "gamma_stage1=" << format_double(l.gamma_stage1) << "\n"
       << p << "gamma_rpiq=" << format_double(l.gamma_rpiq) << "\n"
       << p << "reduction_pct=" << format_double(l.reduction_pct) << "\n"
       << p << "iterations=" << l.iterations << "\n"
       << p << "stopped_early=" << (l.stopped_early ? "true" : "false") << "\n";
  }
}

inline void write_report(std::ostream& os, const ComparisonReport& r) {
  write_config_echo(os, r.config);
  for (const auto& l : r.layers) {
    const std::string p = "layer." + l.name + ".";
    os << p << "gamma_stage1=" << format_double(l.gamma_stage1) << "\n"
       << p << "gamma_rpiq=" << format_double(l.gamma_rpiq) << "\n"
       << p << "reduction_pct=" << format_double(l.reduction_pct) << "\n"
       << p << "iterations=" << l.iterations << "\n"
       << p << "stopped_early=" << (l.stopped_early ? "true" : "false") << "\n";
  }
  os << "totals.gptq_peak_bytes=" << r.gptq_cost.peak_bytes << "\n"
     << "totals.rpiq_peak_bytes=" << r.rpiq_cost.peak_bytes << "\n"
     << "totals.delta_mem_bytes=" << r.overheads.delta_mem_bytes << "\n"
     << "totals.gptq_seconds=" << format_double(r.gptq_cost.seconds) << "\n"
     << "totals.rpiq_seconds=" << format_double(r.rpiq_cost.seconds) << "\n"
     << "totals.delta_time=" << format_double(r.overheads.delta_time) << "\n";
}

inline void write_summary_csv(std::ostream& os, const std::vector<LayerComparison>& layers) {
  os << "layer,gamma_stage1,gamma_rpiq,reduction_pct,iterations,stopped_early\n";
  for (const auto& l : layers) {
    os << l.name << "," << format_double(l.gamma_stage1) << "," << format_double(l.gamma_rpiq) << ","
       << format_double(l.reduction_pct) << "," << l.iterations << "," << (l.stopped_early ? 1 : 0) << "\n";
  }
}

// One row per recorded loss. phase is "stage1" for t = 0, "sweep" for every
// refinement sweep and "final" for the weights actually returned.
inline void write_trace_csv(std::ostream& os, const std::vector<LayerReport>& layers) {
  os << "layer,t,gamma,phase\n";
  for (const auto& l : layers) {
    for (std::size_t t = 0; t < l.trace.gamma.size(); ++t) {
      os << l.name << "," << t << "," << format_double(l.trace.gamma[t]) << "," << (t == 0 ? "stage1" : "sweep")
         << "\n";
    }
    os << l.name << "," << l.trace.iterations << "," << format_double(l.trace.gamma_final) << ",final\n";
  }
}

}  // namespace rpiq

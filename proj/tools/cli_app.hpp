#pragma once

// Command-line front end. Kept header-only so tests can drive run() in-process.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "rpiq/rpiq.hpp"

namespace rpiq::cli {

enum ExitCode : int { ok = 0, internal = 1, usage = 2, io_failure = 3, numeric_failure = 4 };

inline int exit_code_for(const std::string& category) {
  if (category == "io" || category == "corrupt" || category == "version") return io_failure;
  if (category == "numeric" || category == "calibration" || category == "shape" || category == "factorization" ||
      category == "singular") {
    return numeric_failure;
  }
  if (category == "usage" || category == "spec" || category == "argument") return usage;
  return internal;
}

struct GenerateOptions {
  std::uint64_t seed = 0;
  std::string layers = "64x64,64x64,64x64";
  std::size_t k = 8;
  std::size_t rows = 128;
  std::string weight_dist = "gaussian:1";
  std::string act_dist = "correlated:0.5";
  std::string model = "model.rpiq";
  std::string calib = "calib.rpiq";
};

struct RunOptions {
  std::string model = "model.rpiq";
  std::string calib = "calib.rpiq";
  std::string out;
  std::string method = "rpiq";
  int bits = kDefaultBits;
  std::size_t group_size = kDefaultGroupSize;
  std::size_t block_size = kDefaultBlockSize;
  double percdamp = kDefaultPercdamp;
  std::size_t iters = kDefaultIters;
  double alpha = kDefaultAlpha;
  double early_stop_tol = kDefaultEarlyStopTol;
  std::string sequential_prop = "on";
  std::string curvature = "instance";
  bool refit_grids = false;
  bool store_snapshot = false;
  bool parallel_layers = false;
  std::string csv;
  std::string trace_csv;
};

namespace detail {

inline void add_run_options(CLI::App& cmd, RunOptions& o, bool with_method) {
  cmd.add_option("--model", o.model, "Checkpoint to quantize")->capture_default_str();
  cmd.add_option("--calib", o.calib, "Calibration batch container")->capture_default_str();
  if (with_method) {
    cmd.add_option("--method", o.method, "Quantizer")->check(CLI::IsMember({"gptq", "rpiq"}))->capture_default_str();
  }
  cmd.add_option("--bits", o.bits, "Bit width in [2, 8]")->capture_default_str();
  cmd.add_option("--group-size", o.group_size, "Columns per quantization group")->capture_default_str();
  cmd.add_option("--block-size", o.block_size, "Columns per refinement block")->capture_default_str();
  cmd.add_option("--percdamp", o.percdamp, "Relative Hessian damping")->capture_default_str();
  cmd.add_option("--iters", o.iters, "Refinement sweeps (0 disables refinement)")->capture_default_str();
  cmd.add_option("--alpha", o.alpha, "Interpolation step in (0, 1]")->capture_default_str();
  cmd.add_option("--early-stop-tol", o.early_stop_tol, "Stop when a sweep improves the loss by less than this fraction")
      ->capture_default_str();
  cmd.add_option("--sequential-prop", o.sequential_prop, "Feed quantized outputs to the next layer")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();
  cmd.add_option("--curvature", o.curvature, "Block normal-equations matrix")
      ->check(CLI::IsMember({"global", "instance"}))
      ->capture_default_str();
  cmd.add_flag("--refit-grids", o.refit_grids, "Refit group grids before each block projection [off]")->capture_default_str();
  cmd.add_flag("--store-snapshot", o.store_snapshot, "Embed the calibration instance in the artifact [off]")
      ->capture_default_str();
  cmd.add_flag("--parallel-layers", o.parallel_layers, "Quantize layers concurrently, needs --sequential-prop off [off]")
      ->capture_default_str();
  cmd.add_option("--csv", o.csv, "Write the per-layer summary as CSV [none]")->capture_default_str();
  cmd.add_option("--trace-csv", o.trace_csv,
                 std::string("Write per-sweep losses as CSV (columns layer,t,gamma,phase)") +
                     (o.trace_csv.empty() ? " [none]" : ""))
      ->capture_default_str();
}

inline QuantizeConfig to_config(const RunOptions& o) {
  QuantizeConfig c;
  c.method = o.method == "gptq" ? Method::gptq : Method::rpiq;
  c.bits = o.bits;
  c.group_size = o.group_size;
  c.block_size = o.block_size;
  c.percdamp = o.percdamp;
  c.curvature = o.curvature == "global" ? CurvatureSource::global : CurvatureSource::instance;
  c.refine.alpha = o.alpha;
  c.refine.t_max = o.iters;
  c.refine.early_stop_tol = o.early_stop_tol;
  c.refine.refit_grids = o.refit_grids;
  c.sequential_propagation = o.sequential_prop == "on";
  c.parallel_layers = o.parallel_layers;
  c.store_snapshot = o.store_snapshot;
  if (!(o.early_stop_tol >= 0.0)) throw ArgumentError("early-stop-tol must be non-negative");
  c.validate();
  return c;
}

inline ConfigEcho echo(const std::string& command, const RunOptions& o, bool with_method) {
  ConfigEcho e{{"command", command}, {"model", o.model}, {"calib", o.calib}};
  if (!o.out.empty()) e.emplace_back("out", o.out);
  if (with_method) e.emplace_back("method", o.method);
  e.emplace_back("bits", std::to_string(o.bits));
  e.emplace_back("group_size", std::to_string(o.group_size));
  e.emplace_back("block_size", std::to_string(o.block_size));
  e.emplace_back("percdamp", format_double(o.percdamp));
  e.emplace_back("iters", std::to_string(o.iters));
  e.emplace_back("alpha", format_double(o.alpha));
  e.emplace_back("early_stop_tol", format_double(o.early_stop_tol));
  e.emplace_back("sequential_prop", o.sequential_prop);
  e.emplace_back("curvature", o.curvature);
  e.emplace_back("refit_grids", o.refit_grids ? "true" : "false");
  e.emplace_back("store_snapshot", o.store_snapshot ? "true" : "false");
  e.emplace_back("parallel_layers", o.parallel_layers ? "true" : "false");
  return e;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  return f;
}

struct Inputs {
  std::vector<NamedMatrix> layers;
  std::shared_ptr<MatrixFile> calib;
  BatchStream batches;
};

inline Inputs load_inputs(const RunOptions& o) {
  Inputs in;
  const Checkpoint ck = load_checkpoint(o.model);
  for (std::size_t i = 0; i < ck.layers.size(); ++i) in.layers.push_back({ck.manifest.layers[i].name, ck.layers[i]});
  in.calib = std::make_shared<MatrixFile>(o.calib, kCalibrationKind);
  // Batches are read from disk one at a time on every pass.
  in.batches = {in.calib->size(), [file = in.calib](std::size_t b) { return file->load(b); }};
  return in;
}

inline std::vector<LayerComparison> summaries(const std::vector<LayerReport>& layers) {
  std::vector<LayerComparison> out;
  for (const auto& l : layers) out.push_back({l.name, l.gamma_stage1, l.gamma_rpiq, l.reduction_pct, l.iterations, l.stopped_early});
  return out;
}

inline void write_side_outputs(const RunOptions& o, const std::vector<LayerReport>& layers) {
  if (!o.csv.empty()) {
    auto f = open_output(o.csv);
    write_summary_csv(f, summaries(layers));
  }
  if (!o.trace_csv.empty()) {
    auto f = open_output(o.trace_csv);
    write_trace_csv(f, layers);
  }
}

inline void write_cost(std::ostream& os, const RunCost& c) {
  os << "totals.peak_bytes=" << c.peak_bytes << "\n"
     << "totals.seconds=" << format_double(c.seconds) << "\n";
}

inline int do_generate(const GenerateOptions& g, std::ostream& out) {
  SyntheticModelSpec spec;
  spec.layers = parse_layer_shapes(g.layers);
  spec.weights = Distribution::parse(g.weight_dist);
  spec.activations = Distribution::parse(g.act_dist);
  spec.seed = g.seed;
  spec.batches = g.k;
  spec.batch_rows = g.rows;
  spec.validate();
  write_model(generate_model(spec), g.model, g.calib);
  write_config_echo(out, {{"command", "generate"},
                          {"seed", std::to_string(g.seed)},
                          {"layers", g.layers},
                          {"k", std::to_string(g.k)},
                          {"rows", std::to_string(g.rows)},
                          {"weight_dist", spec.weights.str()},
                          {"act_dist", spec.activations.str()},
                          {"model", g.model},
                          {"calib", g.calib}});
  return ok;
}

inline int do_quantize(const RunOptions& o, std::ostream& out) {
  const QuantizeConfig cfg = to_config(o);
  const Inputs in = load_inputs(o);
  const QuantizeOutcome res = quantize_model(in.layers, in.batches, cfg);
  save_quantized(res.artifact, o.out);
  write_config_echo(out, echo("quantize", o, true));
  write_layer_reports(out, res.layers);
  write_cost(out, res.cost);
  write_side_outputs(o, res.layers);
  return ok;
}

inline int do_compare(const RunOptions& o, std::ostream& out) {
  const QuantizeConfig cfg = to_config(o);
  const Inputs in = load_inputs(o);
  const Comparison c = compare_methods(in.layers, in.batches, cfg, echo("compare", o, false));
  if (!o.out.empty()) save_quantized(c.rpiq.artifact, o.out);
  write_report(out, c.report);
  write_side_outputs(o, c.rpiq.layers);
  return ok;
}

inline int do_convergence(const RunOptions& o, std::ostream& out) {
  QuantizeConfig cfg = to_config(o);
  cfg.method = Method::rpiq;
  const Inputs in = load_inputs(o);
  const QuantizeOutcome res = quantize_model(in.layers, in.batches, cfg);
  write_config_echo(out, echo("convergence-report", o, false));
  write_layer_reports(out, res.layers);
  RunOptions side = o;
  side.trace_csv = o.trace_csv.empty() ? "trace.csv" : o.trace_csv;
  write_side_outputs(side, res.layers);
  out << "trace_csv=" << side.trace_csv << "\n";
  return ok;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-stage post-training weight quantizer: greedy Hessian-guided quantization followed by "
               "residual-projected block refinement."};
  app.name("rpiq");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  GenerateOptions gen;
  auto* generate = app.add_subcommand("generate", "Write a seeded synthetic model and calibration batches");
  generate->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  generate->add_option("--layers", gen.layers, "Comma separated OUTxIN layer shapes")->capture_default_str();
  generate->add_option("--k", gen.k, "Number of calibration batches")->capture_default_str();
  generate->add_option("--rows", gen.rows, "Rows per calibration batch")->capture_default_str();
  generate->add_option("--weight-dist", gen.weight_dist, "gaussian:SIGMA | uniform:LO,HI")->capture_default_str();
  generate->add_option("--act-dist", gen.act_dist, "gaussian:SIGMA | uniform:LO,HI | correlated:RHO")
      ->capture_default_str();
  generate->add_option("--model", gen.model, "Checkpoint output path")->capture_default_str();
  generate->add_option("--calib", gen.calib, "Calibration output path")->capture_default_str();

  RunOptions quant_opts;
  quant_opts.out = "quantized.rpiq";
  auto* quantize = app.add_subcommand("quantize", "Quantize a checkpoint and write the packed artifact");
  detail::add_run_options(*quantize, quant_opts, true);
  quantize->add_option("--out", quant_opts.out, "Artifact output path")->capture_default_str();

  RunOptions cmp_opts;
  auto* compare = app.add_subcommand("compare", "Run stage 1 alone and with refinement; report both");
  detail::add_run_options(*compare, cmp_opts, false);
  compare->add_option("--out", cmp_opts.out, "Optional path for the refined artifact [none]")->capture_default_str();

  RunOptions conv_opts;
  conv_opts.trace_csv = "trace.csv";
  auto* convergence = app.add_subcommand("convergence-report", "Record the per-sweep loss of every layer");
  detail::add_run_options(*convergence, conv_opts, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << (app.got_subcommand(generate)      ? generate->help()
            : app.got_subcommand(quantize)    ? quantize->help()
            : app.got_subcommand(compare)     ? compare->help()
            : app.got_subcommand(convergence) ? convergence->help()
                                              : app.help());
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (auto& ch : msg) ch = ch == '\n' ? ' ' : ch;
    err << "error: usage: " << msg << "\n";
    return usage;
  }

  try {
    if (*generate) return detail::do_generate(gen, out);
    if (*quantize) return detail::do_quantize(quant_opts, out);
    if (*compare) return detail::do_compare(cmp_opts, out);
    return detail::do_convergence(conv_opts, out);
  } catch (const Error& e) {
    std::string msg = e.what();
    for (auto& ch : msg) ch = ch == '\n' ? ' ' : ch;
    err << "error: " << e.category() << ": " << msg << "\n";
    return exit_code_for(e.category());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: io: " << e.what() << "\n";
    return io_failure;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return internal;
  }
}

}  // namespace rpiq::cli

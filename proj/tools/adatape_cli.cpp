// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "adatape/errors.hpp"
#include "adatape/harness.hpp"
#include "adatape/io.hpp"

namespace {

using namespace adatape;
namespace fs = std::filesystem;

RunConfig config_from(const std::string& path) {
  RunConfig c = path.empty() ? default_run_config(TaskKind::kParity) : load_run_config(path);
  apply_seed_override(c);
  resolve_run_config(c);
  return c;
}

void print_eval(const EvalMetrics& m) {
  std::printf("samples %zu\naccuracy %.6f\navg_seq_len %.6f\nmax_seq_len %.0f\nvar_seq_len %.6f\n", m.samples,
              m.accuracy, m.seq.avg, m.seq.max, m.seq.var);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AdaTape: adaptive tape reading for transformer encoders"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, traces;
  std::optional<std::size_t> steps;

  auto* train_cmd = app.add_subcommand("train", "train a model and write metrics.csv and checkpoint.atkp");
  train_cmd->add_option("-c,--config", config_path, "JSON run config (parity defaults when omitted)");
  train_cmd->add_option("-o,--out", out_dir, "output directory (overrides output_dir)");
  train_cmd->add_option("--steps", steps, "training steps (overrides steps)");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint; writes eval.csv and traces.csv");
  eval_cmd->add_option("checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("-c,--config", config_path, "config to build the model from instead of the embedded one");
  eval_cmd->add_option("-o,--out", out_dir, "output directory")->required();

  std::size_t probes = 20, gc_batch = 4;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the full loss in double precision");
  grad_cmd->add_option("-c,--config", config_path, "JSON run config");
  grad_cmd->add_option("--probes", probes, "parameter entries to probe (0 = all)");
  grad_cmd->add_option("--batch", gc_batch, "samples in the checked batch");

  std::optional<double> ln_p;
  std::size_t ln_dim = 64, ln_pairs = 1000;
  std::uint64_t ln_seed = 0;
  auto* ln_cmd = app.add_subcommand("lndiag", "layer-norm scale absorption diagnostic (eps = 0)");
  ln_cmd->add_option("-p", ln_p, "fixed scale factor; random in (0, 10] when omitted");
  ln_cmd->add_option("--dim", ln_dim, "vector width");
  ln_cmd->add_option("--pairs", ln_pairs, "number of random vectors");
  ln_cmd->add_option("--seed", ln_seed, "random seed");

  std::size_t rows = 0, cols = 0;
  auto* heat_cmd = app.add_subcommand("heatmap", "selection heatmap (PGM) and frequency tables from a trace CSV");
  heat_cmd->add_option("traces", traces, "trace CSV written by eval")->required();
  heat_cmd->add_option("--rows", rows, "bank grid rows")->required();
  heat_cmd->add_option("--cols", cols, "bank grid columns")->required();
  heat_cmd->add_option("-o,--out", out_dir, "output directory")->required();

  auto* sweep_cmd = app.add_subcommand("parity-sweep", "train and evaluate every variant at every parity length");
  sweep_cmd->add_option("-c,--config", config_path, "JSON run config");
  sweep_cmd->add_option("-o,--out", out_dir, "output directory (overrides output_dir)");
  sweep_cmd->add_option("--steps", steps, "training steps per run");

  std::size_t synth_count = 1024, synth_width = 28, synth_classes = 10;
  std::uint64_t synth_seed = 0;
  std::string synth_images, synth_labels;
  auto* synth_cmd = app.add_subcommand("synth-idx", "write a synthetic image set as IDX files");
  synth_cmd->add_option("--count", synth_count, "number of images");
  synth_cmd->add_option("--width", synth_width, "image width");
  synth_cmd->add_option("--classes", synth_classes, "number of classes (at most 10)");
  synth_cmd->add_option("--seed", synth_seed, "random seed");
  synth_cmd->add_option("--images", synth_images, "output image file")->required();
  synth_cmd->add_option("--labels", synth_labels, "output label file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      RunConfig c = config_from(config_path);
      if (!out_dir.empty()) c.output_dir = out_dir;
      if (steps) c.steps = *steps;
      TrainResult r = train(c);
      std::printf("steps %zu\n", r.steps);
      print_eval(r.final_eval);
      std::printf("metrics %s\ncheckpoint %s\n", r.metrics.string().c_str(), r.checkpoint.string().c_str());
    } else if (eval_cmd->parsed()) {
      std::optional<RunConfig> override_config;
      if (!config_path.empty()) override_config = config_from(config_path);
      EvalMetrics m = evaluate_checkpoint(checkpoint, out_dir, override_config);
      print_eval(m);
    } else if (grad_cmd->parsed()) {
      RunConfig c = config_from(config_path);
      GradCheckReport report = model_grad_check(c, probes, gc_batch);
      for (const auto& p : report.params) {
        std::printf("%-32s checked %3zu  max_rel_error %.3e\n", p.name.c_str(), p.checked, p.max_rel_error);
      }
      std::printf("max_rel_error %.3e\n%s\n", report.max_rel_error, report.passed ? "PASS" : "FAIL");
      return report.passed ? 0 : 1;
    } else if (ln_cmd->parsed()) {
      LnDiagResult r = layernorm_diagnostic(ln_pairs, ln_dim, ln_seed, ln_p);
      std::printf("pairs %zu\nmax_deviation %.3e\n", r.pairs, r.max_deviation);
    } else if (heat_cmd->parsed()) {
      auto trace = parse_trace_csv(read_text(traces));
      emit_heatmap(trace, rows, cols, out_dir);
      std::printf("selections %zu\nwrote %s\n", trace.size(), (fs::path(out_dir) / "heatmap.pgm").string().c_str());
    } else if (sweep_cmd->parsed()) {
      RunConfig c = config_from(config_path);
      if (!out_dir.empty()) c.output_dir = out_dir;
      if (steps) c.steps = *steps;
      for (const auto& row : parity_sweep(c)) {
        std::printf("%-9s N=%-3zu accuracy %.4f avg_seq_len %.3f var_seq_len %.3f\n",
                    variant_name(row.variant).c_str(), row.length, row.metrics.accuracy, row.metrics.seq.avg,
                    row.metrics.seq.var);
      }
    } else if (synth_cmd->parsed()) {
      write_image_set(synthetic_images(synth_count, synth_width, synth_classes, synth_seed), synth_images,
                      synth_labels);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

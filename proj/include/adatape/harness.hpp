// SPDX-License-Identifier: Apache-2.0
//
// Run configuration, training, evaluation and artifact writers.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adatape/grad_check.hpp"
#include "adatape/halting.hpp"
#include "adatape/model.hpp"
#include "adatape/optim.hpp"
#include "adatape/tasks.hpp"

namespace adatape {

enum class TaskKind { kParity, kImage };

struct ParityTaskConfig {
  std::size_t length = 20;
  std::size_t eval_samples = 2048;
  std::vector<std::size_t> sweep_lengths{8, 12, 16, 20};
  std::vector<Variant> sweep_variants{Variant::kAdaTape, Variant::kVanilla};
};

struct ImageTaskConfig {
  // Empty paths select the synthetic generator.
  std::string train_images, train_labels, eval_images, eval_labels;
  std::size_t width = 28;
  std::size_t input_patch = 7;
  std::size_t bank_patch = 4;
  std::size_t synthetic_train = 4096;
  std::size_t synthetic_eval = 1024;
};

struct OptimizerConfig {
  double lr = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::size_t warmup_steps = 1000;
  LrSchedule schedule = LrSchedule::kConstant;
};

struct RunConfig {
  TaskKind task = TaskKind::kParity;
  ParityTaskConfig parity;
  ImageTaskConfig image;
  ModelConfig model;
  AtrConfig halting;
  OptimizerConfig optimizer;
  std::size_t steps = 10000;
  std::size_t batch_size = 128;
  std::size_t eval_every = 1000;
  std::size_t eval_batch_size = 256;
  double lambda = 0.01;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  bool log_wallclock = false;
};

RunConfig default_run_config(TaskKind task);

// Strict JSON: unknown keys and wrongly typed values raise ConfigError. Fields
// not present keep the defaults of the selected task. The result is resolved.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_json(const RunConfig& config);

// Fills task-dependent model fields (input and bank geometry, class count) and,
// for parity, tau = N/4 and T = N/2 when those are left at 0. Validates.
void resolve_run_config(RunConfig& config);

// Replaces config.seed with ADATAPE_SEED when that variable is set.
void apply_seed_override(RunConfig& config);

struct SeqStats {
  double avg = 0.0;
  double max = 0.0;
  double var = 0.0;  // population variance
};
SeqStats seq_stats(std::span<const std::size_t> lengths);

struct EvalMetrics {
  std::size_t samples = 0;
  double accuracy = 0.0;
  SeqStats seq;
  double mean_ponder = 0.0;
  std::vector<std::size_t> seq_lengths;
  std::vector<AtrTrace> traces;  // empty for baselines
};

// Eval-mode pass over the task's evaluation set.
EvalMetrics evaluate_model(const AdaTapeModel<float>& model, const RunConfig& config);

struct TrainResult {
  std::size_t steps = 0;
  EvalMetrics final_eval;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
};

// Writes <output_dir>/metrics.csv and <output_dir>/checkpoint.atkp. A non-finite
// loss or gradient writes last_good.atkp and nan_dump.txt, then throws
// NumericError.
TrainResult train(const RunConfig& config);

inline constexpr const char* kMetricsHeader =
    "step,train_loss,main_loss,ponder_loss,eval_accuracy,avg_seq_len,max_seq_len,var_seq_len,wallclock";

void save_model_checkpoint(const std::filesystem::path& path, const AdaTapeModel<float>& model,
                           const RunConfig& config);
// Rebuilds the model from the embedded config (or from override_config when
// given) and loads every parameter. Mismatched entries are listed in a
// ShapeError.
AdaTapeModel<float> load_model_checkpoint(const std::filesystem::path& path, RunConfig& config,
                                          const std::optional<RunConfig>& override_config = std::nullopt);

// Loads a checkpoint, evaluates it and writes <out_dir>/eval.csv and, for
// AdaTape models, <out_dir>/traces.csv.
EvalMetrics evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir,
                                const std::optional<RunConfig>& override_config = std::nullopt);

struct Heatmap {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint64_t> counts;  // rows * cols selection counts
};
Heatmap selection_heatmap(std::span<const TraceRow> trace, std::size_t rows, std::size_t cols);
// Binary P5 image scaled so that the largest count maps to 255.
std::vector<std::uint8_t> heatmap_pgm(const Heatmap& map);
std::string heatmap_counts_csv(const Heatmap& map);
// Positions sorted by count, largest first (ties by position).
std::string heatmap_frequency_csv(const Heatmap& map);
// Writes heatmap.pgm, heatmap_counts.csv and selection_frequency.csv.
Heatmap emit_heatmap(std::span<const TraceRow> trace, std::size_t rows, std::size_t cols,
                     const std::filesystem::path& out_dir);

struct SweepRow {
  Variant variant = Variant::kAdaTape;
  std::size_t length = 0;
  EvalMetrics metrics;
};
// Trains and evaluates every (variant, length) pair; writes <output_dir>/sweep.csv.
std::vector<SweepRow> parity_sweep(const RunConfig& base);

// Finite-difference check of the full training loss in double precision.
GradCheckReport model_grad_check(const RunConfig& config, std::size_t probes, std::size_t batch_size);

struct LnDiagResult {
  std::size_t pairs = 0;
  double max_deviation = 0.0;
};
// Random (p, z) pairs with p drawn from (0, 10] unless fixed_p is given.
LnDiagResult layernorm_diagnostic(std::size_t pairs, std::size_t dim, std::uint64_t seed,
                                  std::optional<double> fixed_p = std::nullopt);

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);

}  // namespace adatape

// SPDX-License-Identifier: Apache-2.0
//
// Dynamic halting: adaptive tape reading (ATR), which grows an input sequence
// by merging top-K bank tokens until the accumulated max softmax weight passes
// a threshold, and the ACT baseline, which weights and accumulates states until
// sigmoid halting scores reach one.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adatape/bank.hpp"

namespace adatape {

enum class PonderLoss { kEntropy, kCollect };
enum class QueryUpdate { kAverage, kReplace };
enum class MaskMode { kNegInf, kMultiplicative };

struct AtrConfig {
  double tau = 2.0;           // halting threshold
  std::size_t max_ponder = 10;  // T
  PonderLoss loss_variant = PonderLoss::kEntropy;
  QueryUpdate query_update = QueryUpdate::kAverage;
  MaskMode mask_mode = MaskMode::kNegInf;
  double query_noise_std = 0.0;
  double bank_mask_prob = 0.0;
  // false reads exactly max_ponder tokens for every sample (fixed-length ablation).
  bool adaptive_length = true;

  // K = T / tau. Throws ConfigError unless that ratio is within 1e-9 of a
  // positive integer.
  std::size_t tokens_per_step() const;
  void validate() const;
  // Throws BankExhaustedError unless K * T <= bank_size.
  void validate_for_bank(std::size_t bank_size) const;
};

struct AtrIteration {
  std::vector<std::size_t> indices;
  std::vector<double> weights;
  double max_weight = 0.0;
  double halting_score = 0.0;  // h_p after this iteration's update (unchanged on the final one)
};

struct AtrTrace {
  std::vector<AtrIteration> iterations;
  double ponder_loss = 0.0;

  std::size_t tape_length() const { return iterations.size(); }
};

template <typename T>
struct AtrStep {
  Tensor<T> token;    // [1, H]
  Tensor<T> weights;  // [1, K]
  std::vector<std::size_t> indices;
};

template <typename T>
struct AtrResult {
  Tensor<T> tape;         // [n, H]
  Tensor<T> ponder_loss;  // scalar
  AtrTrace trace;
};

// Indices of the k largest scores among rows whose mask count is zero, largest
// first, ties to the lowest index. Throws BankExhaustedError if fewer than k rows
// qualify.
template <typename T>
std::vector<std::size_t> top_k_unmasked(std::span<const T> scores, std::span<const std::uint8_t> mask,
                                        std::size_t k);

// One scoring-and-merge step. query is [1, H]; mask holds one selection count
// per bank row.
template <typename T>
AtrStep<T> atr_step(const Tensor<T>& query, const TapeBank<T>& bank, std::span<const std::uint8_t> mask,
                    const AtrConfig& cfg);

// Full reading loop. initial_mask may be empty (no pre-masked rows).
template <typename T>
AtrResult<T> atr_read(const Tensor<T>& query, const TapeBank<T>& bank, const AtrConfig& cfg,
                      std::span<const std::uint8_t> initial_mask = {});

// Query noise and random bank masking for training; identity when training is
// false or both knobs are zero.
template <typename T>
std::pair<Tensor<T>, std::vector<std::uint8_t>> apply_training_tricks(const Tensor<T>& query,
                                                                      std::vector<std::uint8_t> bank_mask,
                                                                      Rng& rng, const AtrConfig& cfg,
                                                                      bool training);

template <typename T>
using StateMap = std::function<Tensor<T>(const Tensor<T>&)>;

template <typename T>
struct ActResult {
  Tensor<T> ponder_loss;  // n + r
  Tensor<T> output;       // accumulated states
  std::size_t updates = 0;  // n
  double remainder = 0.0;   // r
  std::size_t state_updates = 0;  // applications of the update map
  std::vector<double> weights;  // coefficient of each accumulated state
};

// ACT over a state matrix. halting_logits maps a state to per-token logits
// whose sigmoid mean is the step's halting score; update maps a state to the
// next one. When max_steps is reached without triggering, the last update is
// weighted by the remainder so accumulation weights always sum to one.
template <typename T>
ActResult<T> act_halt(const Tensor<T>& initial, const StateMap<T>& halting_logits, const StateMap<T>& update,
                      std::size_t max_steps, double eps = 0.01);

// Max |layer_norm(p * z) - layer_norm(z)| with unit gain, zero bias, eps = 0.
double layernorm_absorption_deviation(double p, std::span<const double> z);

struct TraceRow {
  std::size_t sample_id = 0;
  std::size_t iter = 0;
  std::size_t k = 0;
  std::size_t bank_index = 0;
  double weight = 0.0;
  double max_w = 0.0;
  double h_p = 0.0;
};

// CSV with header sample_id,iter,k,bank_index,weight,max_w,h_p.
std::string trace_csv(std::span<const AtrTrace> traces, std::span<const std::size_t> sample_ids);
std::vector<TraceRow> parse_trace_csv(const std::string& text);

}  // namespace adatape

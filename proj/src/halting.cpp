// SPDX-License-Identifier: Apache-2.0
#include "adatape/halting.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "adatape/ops.hpp"

namespace adatape {

std::size_t AtrConfig::tokens_per_step() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be positive and finite");
  if (max_ponder == 0) throw ConfigError("max ponder times T must be positive");
  const double ratio = static_cast<double>(max_ponder) / tau;
  const double k = std::round(ratio);
  if (k < 1.0 || std::abs(ratio - k) > 1e-9) {
    throw ConfigError("T / tau must be a positive integer, got " + std::to_string(ratio));
  }
  return static_cast<std::size_t>(k);
}

void AtrConfig::validate() const {
  tokens_per_step();
  if (query_noise_std < 0.0) throw ConfigError("query_noise_std must be non-negative");
  if (bank_mask_prob < 0.0 || bank_mask_prob >= 1.0) throw ConfigError("bank_mask_prob must be in [0, 1)");
}

void AtrConfig::validate_for_bank(std::size_t bank_size) const {
  const std::size_t need = tokens_per_step() * max_ponder;
  if (need > bank_size) {
    throw BankExhaustedError("K * T = " + std::to_string(need) + " exceeds bank size " + std::to_string(bank_size));
  }
}

template <typename T>
std::vector<std::size_t> top_k_unmasked(std::span<const T> scores, std::span<const std::uint8_t> mask,
                                        std::size_t k) {
  std::vector<std::size_t> candidates;
  candidates.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw NumericError("non-finite tape score at bank row " + std::to_string(i));
    if (mask.empty() || mask[i] == 0) candidates.push_back(i);
  }
  if (candidates.size() < k) {
    throw BankExhaustedError("need " + std::to_string(k) + " unmasked bank rows, have " +
                             std::to_string(candidates.size()));
  }
  auto before = [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                    before);
  candidates.resize(k);
  return candidates;
}

template <typename T>
AtrStep<T> atr_step(const Tensor<T>& query, const TapeBank<T>& bank, std::span<const std::uint8_t> mask,
                    const AtrConfig& cfg) {
  const std::size_t k = cfg.tokens_per_step();
  const std::size_t h = bank.key_dim;
  if (query.rank() != 2 || query.dim(0) != 1 || query.dim(1) != bank.width()) {
    throw ShapeError("atr_step: query " + query.shape().str() + " vs bank " + bank.tokens.shape().str());
  }
  if (mask.size() != bank.size()) throw ShapeError("atr_step: mask length does not match bank");
  const std::size_t unmasked =
      static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{0}));
  if (unmasked < k) {
    throw BankExhaustedError("need " + std::to_string(k) + " unmasked bank rows, have " + std::to_string(unmasked));
  }

  Tensor<T> scores = matmul_nt(slice_last(query, 0, h), slice_last(bank.tokens, 0, h));  // [1, B]
  std::vector<std::size_t> indices;
  if (cfg.mask_mode == MaskMode::kNegInf) {
    indices = top_k_unmasked<T>(scores.data(), mask, k);
  } else {
    std::vector<T> keep(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) keep[i] = mask[i] ? T{0} : T{1};
    scores = mul_const<T>(scores, keep);
    indices = top_k_unmasked<T>(scores.data(), {}, k);
  }
  Tensor<T> weights = softmax(gather(scores, indices), static_cast<T>(std::sqrt(static_cast<double>(h))));
  Tensor<T> token = matmul(weights, gather_rows(bank.tokens, indices));
  return {token, weights, std::move(indices)};
}

template <typename T>
AtrResult<T> atr_read(const Tensor<T>& query, const TapeBank<T>& bank, const AtrConfig& cfg,
                      std::span<const std::uint8_t> initial_mask) {
  cfg.validate();
  std::vector<std::uint8_t> mask(bank.size(), 0);
  if (!initial_mask.empty()) {
    if (initial_mask.size() != bank.size()) throw ShapeError("atr_read: initial mask length does not match bank");
    std::copy(initial_mask.begin(), initial_mask.end(), mask.begin());
  }

  AtrResult<T> result;
  std::vector<Tensor<T>> tokens;
  Tensor<T> q = query;
  Tensor<T> loss = Tensor<T>::scalar(T{0});
  Tensor<T> halting_sum = Tensor<T>::scalar(T{0});  // differentiable h_p for the collect variant
  double h_p = 0.0;

  while (h_p < cfg.tau || !cfg.adaptive_length) {
    if (tokens.size() == cfg.max_ponder) break;
    AtrStep<T> step = atr_step(q, bank, mask, cfg);
    tokens.push_back(step.token);

    auto w = step.weights.data();
    const std::size_t best = static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
    const double max_w = static_cast<double>(w[best]);
    AtrIteration record;
    record.indices = step.indices;
    record.weights.assign(w.begin(), w.end());
    record.max_weight = max_w;

    if (cfg.adaptive_length && h_p + max_w > cfg.tau) {
      record.halting_score = h_p;
      result.trace.iterations.push_back(std::move(record));
      break;
    }
    h_p += max_w;
    if (!std::isfinite(h_p)) throw NumericError("halting score became non-finite");
    record.halting_score = h_p;
    result.trace.iterations.push_back(std::move(record));

    if (cfg.loss_variant == PonderLoss::kEntropy) {
      loss = add(loss, add_scalar(scale(sum(mul(step.weights, step.weights)), T{-1}), T{1}));
    } else {
      const std::size_t at[] = {best};
      halting_sum = add(halting_sum, reshape(gather(step.weights, at), Shape{}));
      loss = add(loss, halting_sum);
    }
    for (std::size_t i : step.indices) {
      if (mask[i] < 0xFF) ++mask[i];
    }
    q = cfg.query_update == QueryUpdate::kAverage ? scale(add(step.token, q), T{0.5}) : step.token;
  }

  result.tape = concat_rows(tokens);
  result.ponder_loss = loss;
  result.trace.ponder_loss = static_cast<double>(loss.item());
  return result;
}

template <typename T>
std::pair<Tensor<T>, std::vector<std::uint8_t>> apply_training_tricks(const Tensor<T>& query,
                                                                      std::vector<std::uint8_t> bank_mask,
                                                                      Rng& rng, const AtrConfig& cfg,
                                                                      bool training) {
  if (!training) return {query, std::move(bank_mask)};
  Tensor<T> q = query;
  if (cfg.query_noise_std > 0.0) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<T> noise(query.numel());
    for (T& v : noise) v = static_cast<T>(cfg.query_noise_std * normal(rng));
    q = add(q, Tensor<T>::from_vector(query.shape(), std::move(noise)));
  }
  if (cfg.bank_mask_prob > 0.0) {
    std::bernoulli_distribution drop(cfg.bank_mask_prob);
    for (auto& m : bank_mask) {
      if (drop(rng)) m = std::max<std::uint8_t>(m, 1);
    }
  }
  return {q, std::move(bank_mask)};
}

template <typename T>
ActResult<T> act_halt(const Tensor<T>& initial, const StateMap<T>& halting_logits, const StateMap<T>& update,
                      std::size_t max_steps, double eps) {
  if (max_steps == 0) throw ConfigError("act_halt: max ponder steps must be positive");
  if (!(eps > 0.0) || eps >= 1.0) throw ConfigError("act_halt: eps must be in (0, 1)");

  ActResult<T> result;
  Tensor<T> state = initial;
  Tensor<T> output = Tensor<T>::zeros(initial.shape());
  Tensor<T> h_p = Tensor<T>::scalar(T{0});
  Tensor<T> remainder;

  while (h_p.item() < T{1}) {
    Tensor<T> p = mean(sigmoid(halting_logits(state)));
    if (static_cast<double>(h_p.item() + p.item()) > 1.0 - eps) {
      remainder = add_scalar(scale(h_p, T{-1}), T{1});
      output = add(output, scale_by(state, remainder));
      result.weights.push_back(static_cast<double>(remainder.item()));
      break;
    }
    state = update(state);
    ++result.state_updates;
    if (result.updates + 1 == max_steps) {
      remainder = add_scalar(scale(h_p, T{-1}), T{1});
      output = add(output, scale_by(state, remainder));
      result.weights.push_back(static_cast<double>(remainder.item()));
      break;
    }
    ++result.updates;
    output = add(output, scale_by(state, p));
    result.weights.push_back(static_cast<double>(p.item()));
    h_p = add(h_p, p);
  }
  if (!remainder.defined()) throw NumericError("act_halt: halting score reached 1 without a remainder step");

  result.remainder = static_cast<double>(remainder.item());
  result.ponder_loss = add_scalar(remainder, static_cast<T>(result.updates));
  result.output = output;
  return result;
}

double layernorm_absorption_deviation(double p, std::span<const double> z) {
  if (p == 0.0) throw ConfigError("layernorm_absorption_deviation: p must be non-zero");
  const std::size_t n = z.size();
  Tensor<double> x = Tensor<double>::from_vector(Shape{1, n}, {z.begin(), z.end()});
  Tensor<double> gamma = Tensor<double>::full(Shape{n}, 1.0);
  Tensor<double> beta = Tensor<double>::zeros(Shape{n});
  NoGradGuard guard;
  Tensor<double> a = layer_norm(scale(x, p), gamma, beta, 0.0);
  Tensor<double> b = layer_norm(x, gamma, beta, 0.0);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

std::string trace_csv(std::span<const AtrTrace> traces, std::span<const std::size_t> sample_ids) {
  if (traces.size() != sample_ids.size()) throw ShapeError("trace_csv: one sample id per trace required");
  std::ostringstream out;
  out.precision(9);
  out << "sample_id,iter,k,bank_index,weight,max_w,h_p\n";
  for (std::size_t t = 0; t < traces.size(); ++t) {
    const auto& iters = traces[t].iterations;
    for (std::size_t i = 0; i < iters.size(); ++i) {
      for (std::size_t k = 0; k < iters[i].indices.size(); ++k) {
        out << sample_ids[t] << ',' << i << ',' << k << ',' << iters[i].indices[k] << ',' << iters[i].weights[k]
            << ',' << iters[i].max_weight << ',' << iters[i].halting_score << '\n';
      }
    }
  }
  return out.str();
}

std::vector<TraceRow> parse_trace_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "sample_id,iter,k,bank_index,weight,max_w,h_p") {
    throw FormatError("trace CSV: unexpected header");
  }
  std::vector<TraceRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    TraceRow row;
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0, c5 = 0, c6 = 0;
    std::istringstream fields(line);
    fields >> row.sample_id >> c1 >> row.iter >> c2 >> row.k >> c3 >> row.bank_index >> c4 >> row.weight >> c5 >>
        row.max_w >> c6 >> row.h_p;
    if (!fields || c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',' || c5 != ',' || c6 != ',') {
      throw FormatError("trace CSV: malformed line " + std::to_string(line_no));
    }
    rows.push_back(row);
  }
  return rows;
}

#define ADATAPE_INSTANTIATE_HALTING(T)                                                                            \
  template std::vector<std::size_t> top_k_unmasked(std::span<const T>, std::span<const std::uint8_t>,             \
                                                   std::size_t);                                                  \
  template AtrStep<T> atr_step(const Tensor<T>&, const TapeBank<T>&, std::span<const std::uint8_t>,               \
                               const AtrConfig&);                                                                 \
  template AtrResult<T> atr_read(const Tensor<T>&, const TapeBank<T>&, const AtrConfig&,                          \
                                 std::span<const std::uint8_t>);                                                  \
  template std::pair<Tensor<T>, std::vector<std::uint8_t>> apply_training_tricks(                                 \
      const Tensor<T>&, std::vector<std::uint8_t>, Rng&, const AtrConfig&, bool);                                 \
  template ActResult<T> act_halt(const Tensor<T>&, const StateMap<T>&, const StateMap<T>&, std::size_t, double);

ADATAPE_INSTANTIATE_HALTING(float)
ADATAPE_INSTANTIATE_HALTING(double)

}  // namespace adatape

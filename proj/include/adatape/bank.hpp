// SPDX-License-Identifier: Apache-2.0
//
// Tape banks: the B x H pool of candidate tape tokens that adaptive tape reading
// scores against a query. A bank is either a trainable matrix shared by every
// sample or is projected from a finer tokenization of each input.
#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "adatape/params.hpp"

namespace adatape {

enum class BankKind { kLearnable, kInputDriven };

template <typename T>
struct TapeBank {
  Tensor<T> tokens;  // [B, H]
  BankKind kind = BankKind::kLearnable;
  std::size_t key_dim = 1;  // leading columns used for scoring

  std::size_t size() const { return tokens.dim(0); }
  std::size_t width() const { return tokens.dim(1); }
};

// bank = h2(h1(fine_tokens) + positions[:B])
template <typename T>
struct BankProjection {
  Tensor<T> h1_weight, h1_bias;
  Tensor<T> h2_weight, h2_bias;
  Tensor<T> positions;  // [max_len, H], learned

  static BankProjection create(ParamStore<T>& params, const std::string& prefix, std::size_t raw_dim,
                               std::size_t hidden, std::size_t max_len, Rng& rng);
  std::size_t max_len() const { return positions.dim(0); }
};

// LayerNorm shared between the bank rows and the query.
template <typename T>
struct SharedNorm {
  Tensor<T> gamma, beta;
  T eps = T(1e-6);

  static SharedNorm create(ParamStore<T>& params, const std::string& prefix, std::size_t hidden, T eps = T(1e-6));
};

// Trainable [bank_size, hidden] matrix, truncated-normal (std 0.02) from seed,
// registered under name.
template <typename T>
TapeBank<T> build_learnable_bank(ParamStore<T>& params, const std::string& name, std::size_t bank_size,
                                 std::size_t hidden, std::size_t key_dim, std::uint64_t seed);

// Projects [B, D] or batched [N, B, D] fine tokens; returns [.., B, H].
template <typename T>
Tensor<T> project_bank_tokens(const Tensor<T>& fine_tokens, const BankProjection<T>& proj);

template <typename T>
TapeBank<T> build_input_driven_bank(const Tensor<T>& fine_tokens, const BankProjection<T>& proj,
                                    std::size_t key_dim);

// Applies the same normalization row-wise to the bank and to the [1, H] query.
template <typename T>
std::pair<TapeBank<T>, Tensor<T>> normalize_bank_and_query(const TapeBank<T>& bank, const Tensor<T>& query,
                                                           const SharedNorm<T>& norm);

}  // namespace adatape

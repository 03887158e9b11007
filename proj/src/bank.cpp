// SPDX-License-Identifier: Apache-2.0
#include "adatape/bank.hpp"

#include "adatape/ops.hpp"

namespace adatape {
namespace {

void check_key_dim(std::size_t key_dim, std::size_t hidden) {
  if (key_dim == 0 || key_dim > hidden) {
    throw ConfigError("key_dim must be in [1, " + std::to_string(hidden) + "], got " + std::to_string(key_dim));
  }
}

}  // namespace

template <typename T>
BankProjection<T> BankProjection<T>::create(ParamStore<T>& params, const std::string& prefix, std::size_t raw_dim,
                                            std::size_t hidden, std::size_t max_len, Rng& rng) {
  if (max_len == 0) throw ConfigError("bank positional table needs at least one row");
  BankProjection proj;
  proj.h1_weight = params.add(prefix + ".h1.w", xavier_uniform<T>(raw_dim, hidden, rng));
  proj.h1_bias = params.add(prefix + ".h1.b", Tensor<T>::zeros(Shape{hidden}));
  proj.positions = params.add(prefix + ".pos", truncated_normal<T>(Shape{max_len, hidden}, 0.02, rng));
  proj.h2_weight = params.add(prefix + ".h2.w", xavier_uniform<T>(hidden, hidden, rng));
  proj.h2_bias = params.add(prefix + ".h2.b", Tensor<T>::zeros(Shape{hidden}));
  return proj;
}

template <typename T>
SharedNorm<T> SharedNorm<T>::create(ParamStore<T>& params, const std::string& prefix, std::size_t hidden, T eps) {
  SharedNorm norm;
  norm.gamma = params.add(prefix + ".gamma", Tensor<T>::full(Shape{hidden}, T{1}));
  norm.beta = params.add(prefix + ".beta", Tensor<T>::zeros(Shape{hidden}));
  norm.eps = eps;
  return norm;
}

template <typename T>
TapeBank<T> build_learnable_bank(ParamStore<T>& params, const std::string& name, std::size_t bank_size,
                                 std::size_t hidden, std::size_t key_dim, std::uint64_t seed) {
  if (bank_size == 0) throw ConfigError("bank_size must be at least 1");
  check_key_dim(key_dim, hidden);
  Rng rng(seed);
  Tensor<T> tokens = params.add(name, truncated_normal<T>(Shape{bank_size, hidden}, 0.02, rng));
  return {tokens, BankKind::kLearnable, key_dim};
}

template <typename T>
Tensor<T> project_bank_tokens(const Tensor<T>& fine_tokens, const BankProjection<T>& proj) {
  if (fine_tokens.rank() != 2 && fine_tokens.rank() != 3) {
    throw ShapeError("fine tokens must be [B, D] or [N, B, D], got " + fine_tokens.shape().str());
  }
  const std::size_t len = fine_tokens.dim(fine_tokens.rank() - 2);
  if (len > proj.max_len()) {
    throw ShapeError("bank of " + std::to_string(len) + " tokens exceeds positional table of " +
                     std::to_string(proj.max_len()));
  }
  Tensor<T> hidden = add_bias(matmul(fine_tokens, proj.h1_weight), proj.h1_bias);
  Tensor<T> pos = slice_rows(proj.positions, 0, len);
  hidden = fine_tokens.rank() == 2 ? add(hidden, pos) : add_broadcast_batch(hidden, pos);
  return add_bias(matmul(hidden, proj.h2_weight), proj.h2_bias);
}

template <typename T>
TapeBank<T> build_input_driven_bank(const Tensor<T>& fine_tokens, const BankProjection<T>& proj,
                                    std::size_t key_dim) {
  if (fine_tokens.rank() != 2) throw ShapeError("build_input_driven_bank expects [B, D] fine tokens");
  if (fine_tokens.dim(0) == 0) throw ConfigError("input-driven bank needs at least one fine token");
  check_key_dim(key_dim, proj.h2_weight.dim(1));
  return {project_bank_tokens(fine_tokens, proj), BankKind::kInputDriven, key_dim};
}

template <typename T>
std::pair<TapeBank<T>, Tensor<T>> normalize_bank_and_query(const TapeBank<T>& bank, const Tensor<T>& query,
                                                           const SharedNorm<T>& norm) {
  const std::size_t hidden = norm.gamma.numel();
  if (bank.width() != hidden || query.shape().back() != hidden) {
    throw ShapeError("normalize_bank_and_query: bank " + bank.tokens.shape().str() + ", query " +
                     query.shape().str() + ", norm dim " + std::to_string(hidden));
  }
  TapeBank<T> out = bank;
  out.tokens = layer_norm(bank.tokens, norm.gamma, norm.beta, norm.eps);
  return {out, layer_norm(query, norm.gamma, norm.beta, norm.eps)};
}

#define ADATAPE_INSTANTIATE_BANK(T)                                                                         \
  template struct BankProjection<T>;                                                                        \
  template struct SharedNorm<T>;                                                                            \
  template TapeBank<T> build_learnable_bank(ParamStore<T>&, const std::string&, std::size_t, std::size_t,   \
                                            std::size_t, std::uint64_t);                                    \
  template Tensor<T> project_bank_tokens(const Tensor<T>&, const BankProjection<T>&);                       \
  template TapeBank<T> build_input_driven_bank(const Tensor<T>&, const BankProjection<T>&, std::size_t);    \
  template std::pair<TapeBank<T>, Tensor<T>> normalize_bank_and_query(const TapeBank<T>&, const Tensor<T>&, \
                                                                      const SharedNorm<T>&);

ADATAPE_INSTANTIATE_BANK(float)
ADATAPE_INSTANTIATE_BANK(double)

}  // namespace adatape

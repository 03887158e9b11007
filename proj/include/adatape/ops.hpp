// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Unless noted, "rows" means the last dimension is
// the feature axis and every leading index is an independent row.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "adatape/tensor.hpp"

namespace adatape {

// --- elementwise --------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
// x * s for a differentiable scalar s.
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value);
// x * c with c a constant (no gradient), same number of elements as x.
template <typename T>
Tensor<T> mul_const(const Tensor<T>& x, std::span<const T> c);
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

// --- broadcasting -------------------------------------------------------------

// x[..., C] + bias[C]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
// x[B, R, C] + y[R, C] for every batch entry.
template <typename T>
Tensor<T> add_broadcast_batch(const Tensor<T>& x, const Tensor<T>& y);
// [R, C] -> [B, R, C]
template <typename T>
Tensor<T> broadcast_batch(const Tensor<T>& x, std::size_t batch);

// --- products -----------------------------------------------------------------

// a[..., K] @ b[K, N]; leading dimensions of a are folded into rows.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a[M, K] @ b[N, K]^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
// a[G, M, K] @ b[G, K, N]
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);
// a[G, M, K] @ b[G, N, K]^T
template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b);

// --- normalization ------------------------------------------------------------

// Row softmax of x / temperature, computed with max subtraction. Throws
// NumericError on non-finite input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, T temperature = T{1});

// Attention softmax over scores[G, M, N] where G = batch * heads. key_valid has
// batch * N entries; invalid keys receive exactly zero probability.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, std::span<const std::uint8_t> key_valid,
                         std::size_t heads, T temperature);

// Row layer normalization. With eps == 0 a zero-variance row throws NumericError.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// --- reductions ---------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
// [R, C] -> [1, C]
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x);
// [B, L, C] -> [B, C]
template <typename T>
Tensor<T> mean_seq(const Tensor<T>& x);
// Mean softmax cross-entropy of logits[B, C] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// --- indexing and layout --------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// Columns [begin, end) of the last dimension.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t end);
// Rows [begin, end) of a 2-D tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);
// Positions [begin, end) along dimension 1 of a [B, L, C] tensor.
template <typename T>
Tensor<T> slice_seq(const Tensor<T>& x, std::size_t begin, std::size_t end);
// Concatenate [B, La, C] and [B, Lb, C] along dimension 1.
template <typename T>
Tensor<T> concat_seq(const Tensor<T>& a, const Tensor<T>& b);
// Stack 2-D tensors with equal column counts vertically.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
// Rows idx of a 2-D tensor, in the given order.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx);
// Flat elements idx of x as a [1, K] row.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::size_t> idx);
// x[i] of a [B, R, C] tensor as [R, C].
template <typename T>
Tensor<T> select_batch(const Tensor<T>& x, std::size_t i);
// x[:, r, :] of a [B, L, C] tensor as [B, C].
template <typename T>
Tensor<T> pick_seq(const Tensor<T>& x, std::size_t r);
// Stack [n_i, C] tensors into [B, length, C], zero-filling rows >= n_i.
template <typename T>
Tensor<T> stack_padded(const std::vector<Tensor<T>>& parts, std::size_t length, std::size_t cols);
// [B, L, H] -> [B * heads, L, H / heads] and back.
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads);
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads);

}  // namespace adatape

// SPDX-License-Identifier: Apache-2.0
#include "adatape/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace adatape {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Gradient buffer of parent i, or nullptr when it does not need one.
template <typename T>
T* parent_grad(TensorNode<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer() : nullptr;
}

template <typename T>
const std::vector<T>& parent_data(const TensorNode<T>& self, std::size_t i) {
  return self.parents[i]->data;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + a.shape().str() +
                                      " vs " + b.shape().str());
}

// Number of rows when the last dimension is treated as features.
template <typename T>
std::size_t row_count(const Tensor<T>& x) {
  return x.numel() / x.shape().back();
}

}  // namespace

// --- elementwise --------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    const std::size_t n = self.data.size();
    for (std::size_t p = 0; p < 2; ++p) {
      if (T* g = parent_grad(self, p)) {
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    const std::size_t n = self.data.size();
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    const auto& x = parent_data(self, 0);
    const auto& y = parent_data(self, 1);
    const std::size_t n = self.data.size();
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * y[i];
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v *= factor;
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [factor](TensorNode<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.data.size(); ++i) g[i] += factor * self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
  require(s.numel() == 1, "scale_by: factor must be a scalar");
  const T factor = s.item();
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v *= factor;
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, s}, [](TensorNode<T>& self) {
    const auto& v = parent_data(self, 0);
    const T factor = parent_data(self, 1)[0];
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < v.size(); ++i) g[i] += factor * self.grad[i];
    }
    if (T* g = parent_grad(self, 1)) {
      T dot = 0;
      for (std::size_t i = 0; i < v.size(); ++i) dot += v[i] * self.grad[i];
      g[0] += dot;
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v += value;
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.data.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul_const(const Tensor<T>& x, std::span<const T> c) {
  require(c.size() == x.numel(), "mul_const: constant has wrong length");
  std::vector<T> factors(c.begin(), c.end());
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * factors[i];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [factors = std::move(factors)](TensorNode<T>& self) {
                                  if (T* g = parent_grad(self, 0)) {
                                    for (std::size_t i = 0; i < factors.size(); ++i) {
                                      g[i] += self.grad[i] * factors[i];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T{1} / std::numbers::sqrt2_v<T>;
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T{0.5} * v[i] * (T{1} + std::erf(v[i] * inv_sqrt2));
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [inv_sqrt2](TensorNode<T>& self) {
    T* g = parent_grad(self, 0);
    if (!g) return;
    const auto& v = parent_data(self, 0);
    const T inv_sqrt_2pi = T{1} / std::sqrt(T{2} * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T cdf = T{0.5} * (T{1} + std::erf(v[i] * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * v[i] * v[i]);
      g[i] += self.grad[i] * (cdf + v[i] * pdf);
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T{1} / (T{1} + std::exp(-v[i]));
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.data.size(); ++i) {
        g[i] += self.grad[i] * self.data[i] * (T{1} - self.data[i]);
      }
    }
  });
}

// --- broadcasting -------------------------------------------------------------

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t cols = x.shape().back();
  require(bias.numel() == cols, "add_bias: bias length " + std::to_string(bias.numel()) +
                                    " vs feature dim " + std::to_string(cols));
  std::vector<T> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % cols];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, bias}, [cols](TensorNode<T>& self) {
    const std::size_t n = self.data.size();
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) g[i % cols] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> add_broadcast_batch(const Tensor<T>& x, const Tensor<T>& y) {
  require(x.rank() == 3 && y.rank() == 2 && x.dim(1) == y.dim(0) && x.dim(2) == y.dim(1),
          "add_broadcast_batch: " + x.shape().str() + " + " + y.shape().str());
  const std::size_t block = y.numel();
  std::vector<T> out(x.data().begin(), x.data().end());
  auto v = y.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i % block];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, y}, [block](TensorNode<T>& self) {
    const std::size_t n = self.data.size();
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) g[i % block] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> broadcast_batch(const Tensor<T>& x, std::size_t batch) {
  require(x.rank() == 2, "broadcast_batch expects a 2-D tensor");
  const std::size_t block = x.numel();
  std::vector<T> out;
  out.reserve(block * batch);
  for (std::size_t b = 0; b < batch; ++b) out.insert(out.end(), x.data().begin(), x.data().end());
  return Tensor<T>::make_result(Shape{batch, x.dim(0), x.dim(1)}, std::move(out), {x},
                                [block](TensorNode<T>& self) {
                                  if (T* g = parent_grad(self, 0)) {
                                    for (std::size_t i = 0; i < self.data.size(); ++i) {
                                      g[i % block] += self.grad[i];
                                    }
                                  }
                                });
}

// --- products -----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(b.rank() == 2 && a.rank() >= 1 && a.shape().back() == b.dim(0),
          "matmul: " + a.shape().str() + " @ " + b.shape().str());
  const std::size_t m = row_count(a), k = b.dim(0), n = b.dim(1);
  Shape out_shape = a.rank() == 3   ? Shape{a.dim(0), a.dim(1), n}
                    : a.rank() == 2 ? Shape{a.dim(0), n}
                                    : Shape{n};
  std::vector<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  return Tensor<T>::make_result(out_shape, std::move(out), {a, b}, [m, k, n](TensorNode<T>& self) {
    ConstMatMap<T> dy(self.grad.data(), m, n);
    if (T* g = parent_grad(self, 0)) {
      MatMap<T>(g, m, k).noalias() += dy * ConstMatMap<T>(parent_data(self, 1).data(), k, n).transpose();
    }
    if (T* g = parent_grad(self, 1)) {
      MatMap<T>(g, k, n).noalias() += ConstMatMap<T>(parent_data(self, 0).data(), m, k).transpose() * dy;
    }
  });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
          "matmul_nt: " + a.shape().str() + " @ " + b.shape().str() + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), n, k).transpose();
  return Tensor<T>::make_result(Shape{m, n}, std::move(out), {a, b}, [m, k, n](TensorNode<T>& self) {
    ConstMatMap<T> dy(self.grad.data(), m, n);
    if (T* g = parent_grad(self, 0)) {
      MatMap<T>(g, m, k).noalias() += dy * ConstMatMap<T>(parent_data(self, 1).data(), n, k);
    }
    if (T* g = parent_grad(self, 1)) {
      MatMap<T>(g, n, k).noalias() += dy.transpose() * ConstMatMap<T>(parent_data(self, 0).data(), m, k);
    }
  });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
          "bmm: " + a.shape().str() + " @ " + b.shape().str());
  const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<T> out(groups * m * n);
  for (std::size_t g = 0; g < groups; ++g) {
    MatMap<T>(out.data() + g * m * n, m, n).noalias() =
        ConstMatMap<T>(a.data().data() + g * m * k, m, k) *
        ConstMatMap<T>(b.data().data() + g * k * n, k, n);
  }
  return Tensor<T>::make_result(
      Shape{groups, m, n}, std::move(out), {a, b}, [groups, m, k, n](TensorNode<T>& self) {
        T* ga = parent_grad(self, 0);
        T* gb = parent_grad(self, 1);
        const T* av = parent_data(self, 0).data();
        const T* bv = parent_data(self, 1).data();
        for (std::size_t g = 0; g < groups; ++g) {
          ConstMatMap<T> dy(self.grad.data() + g * m * n, m, n);
          if (ga) MatMap<T>(ga + g * m * k, m, k).noalias() += dy * ConstMatMap<T>(bv + g * k * n, k, n).transpose();
          if (gb) MatMap<T>(gb + g * k * n, k, n).noalias() += ConstMatMap<T>(av + g * m * k, m, k).transpose() * dy;
        }
      });
}

template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
          "bmm_nt: " + a.shape().str() + " @ " + b.shape().str() + "^T");
  const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  std::vector<T> out(groups * m * n);
  for (std::size_t g = 0; g < groups; ++g) {
    MatMap<T>(out.data() + g * m * n, m, n).noalias() =
        ConstMatMap<T>(a.data().data() + g * m * k, m, k) *
        ConstMatMap<T>(b.data().data() + g * n * k, n, k).transpose();
  }
  return Tensor<T>::make_result(
      Shape{groups, m, n}, std::move(out), {a, b}, [groups, m, k, n](TensorNode<T>& self) {
        T* ga = parent_grad(self, 0);
        T* gb = parent_grad(self, 1);
        const T* av = parent_data(self, 0).data();
        const T* bv = parent_data(self, 1).data();
        for (std::size_t g = 0; g < groups; ++g) {
          ConstMatMap<T> dy(self.grad.data() + g * m * n, m, n);
          if (ga) MatMap<T>(ga + g * m * k, m, k).noalias() += dy * ConstMatMap<T>(bv + g * n * k, n, k);
          if (gb) MatMap<T>(gb + g * n * k, n, k).noalias() += dy.transpose() * ConstMatMap<T>(av + g * m * k, m, k);
        }
      });
}

// --- normalization ------------------------------------------------------------

namespace {

template <typename T>
void softmax_backward(TensorNode<T>& self, std::size_t cols, T temperature) {
  T* g = parent_grad(self, 0);
  if (!g) return;
  const std::size_t rows = self.data.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* y = self.data.data() + r * cols;
    const T* dy = self.grad.data() + r * cols;
    T dot = 0;
    for (std::size_t c = 0; c < cols; ++c) dot += y[c] * dy[c];
    for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (dy[c] - dot) / temperature;
  }
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, T temperature) {
  if (!(temperature > T{0})) throw NumericError("softmax: temperature must be positive");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = row_count(x);
  auto v = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = v.data() + r * cols;
    T hi = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (!std::isfinite(in[c])) throw NumericError("softmax: non-finite input");
      hi = std::max(hi, in[c]);
    }
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = std::exp((in[c] - hi) / temperature);
      total += out[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= total;
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [cols, temperature](TensorNode<T>& self) {
    softmax_backward(self, cols, temperature);
  });
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, std::span<const std::uint8_t> key_valid,
                         std::size_t heads, T temperature) {
  require(scores.rank() == 3, "masked_softmax expects [G, M, N] scores");
  const std::size_t groups = scores.dim(0), m = scores.dim(1), n = scores.dim(2);
  require(heads > 0 && groups % heads == 0 && key_valid.size() == (groups / heads) * n,
          "masked_softmax: key mask does not match scores " + scores.shape().str());
  auto v = scores.data();
  std::vector<T> out(scores.numel(), T{0});
  for (std::size_t g = 0; g < groups; ++g) {
    const std::uint8_t* valid = key_valid.data() + (g / heads) * n;
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t base = (g * m + i) * n;
      T hi = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (valid[j]) hi = std::max(hi, v[base + j]);
      }
      if (!std::isfinite(hi)) continue;
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (valid[j]) {
          out[base + j] = std::exp((v[base + j] - hi) / temperature);
          total += out[base + j];
        }
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j] /= total;
    }
  }
  return Tensor<T>::make_result(scores.shape(), std::move(out), {scores},
                                [n, temperature](TensorNode<T>& self) { softmax_backward(self, n, temperature); });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t cols = x.shape().back();
  require(gamma.numel() == cols && beta.numel() == cols,
          "layer_norm: affine parameters do not match feature dim " + std::to_string(cols));
  const std::size_t rows = row_count(x);
  auto v = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<T> out(x.numel());
  std::vector<T> normed(x.numel());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = v.data() + r * cols;
    T mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<T>(cols);
    if (var + eps == T{0}) throw NumericError("layer_norm: zero variance with eps = 0");
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      normed[r * cols + c] = (in[c] - mu) * inv_std[r];
      out[r * cols + c] = normed[r * cols + c] * gv[c] + bv[c];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [cols, rows, normed = std::move(normed), inv_std = std::move(inv_std)](TensorNode<T>& self) {
        T* gx = parent_grad(self, 0);
        T* gg = parent_grad(self, 1);
        T* gb = parent_grad(self, 2);
        const auto& gv = parent_data(self, 1);
        std::vector<T> dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * cols;
          const T* xh = normed.data() + r * cols;
          if (gg || gb) {
            for (std::size_t c = 0; c < cols; ++c) {
              if (gg) gg[c] += dy[c] * xh[c];
              if (gb) gb[c] += dy[c];
            }
          }
          if (!gx) continue;
          T mean_d = 0, mean_dx = 0;
          for (std::size_t c = 0; c < cols; ++c) {
            dxhat[c] = dy[c] * gv[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
          }
          mean_d /= static_cast<T>(cols);
          mean_dx /= static_cast<T>(cols);
          for (std::size_t c = 0; c < cols; ++c) {
            gx[r * cols + c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
          }
        }
      });
}

// --- reductions ---------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return Tensor<T>::make_result(Shape{}, {total}, {x}, [](TensorNode<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  require(x.rank() == 2 && x.dim(0) > 0, "mean_rows expects a non-empty 2-D tensor");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(cols, T{0});
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c] += v[r * cols + c];
  }
  for (T& o : out) o /= static_cast<T>(rows);
  return Tensor<T>::make_result(Shape{1, cols}, std::move(out), {x}, [rows, cols](TensorNode<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[c] / static_cast<T>(rows);
      }
    }
  });
}

template <typename T>
Tensor<T> mean_seq(const Tensor<T>& x) {
  require(x.rank() == 3 && x.dim(1) > 0, "mean_seq expects a non-empty [B, L, C] tensor");
  const std::size_t batch = x.dim(0), len = x.dim(1), cols = x.dim(2);
  std::vector<T> out(batch * cols, T{0});
  auto v = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t l = 0; l < len; ++l) {
      for (std::size_t c = 0; c < cols; ++c) out[b * cols + c] += v[(b * len + l) * cols + c];
    }
  }
  for (T& o : out) o /= static_cast<T>(len);
  return Tensor<T>::make_result(Shape{batch, cols}, std::move(out), {x},
                                [batch, len, cols](TensorNode<T>& self) {
                                  T* g = parent_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t b = 0; b < batch; ++b) {
                                    for (std::size_t l = 0; l < len; ++l) {
                                      for (std::size_t c = 0; c < cols; ++c) {
                                        g[(b * len + l) * cols + c] +=
                                            self.grad[b * cols + c] / static_cast<T>(len);
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require(logits.rank() == 2 && logits.dim(0) == labels.size(),
          "cross_entropy: logits " + logits.shape().str() + " vs " + std::to_string(labels.size()) +
              " labels");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  auto v = logits.data();
  std::vector<T> probs(logits.numel());
  std::vector<int> targets(labels.begin(), labels.end());
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= cols) {
      throw ShapeError("cross_entropy: label " + std::to_string(targets[r]) + " out of range");
    }
    const T* in = v.data() + r * cols;
    T hi = *std::max_element(in, in + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      probs[r * cols + c] = std::exp(in[c] - hi);
      total += probs[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= total;
    loss += -(in[targets[r]] - hi - std::log(total));
  }
  loss /= static_cast<T>(rows);
  return Tensor<T>::make_result(
      Shape{}, {loss}, {logits},
      [rows, cols, probs = std::move(probs), targets = std::move(targets)](TensorNode<T>& self) {
        T* g = parent_grad(self, 0);
        if (!g) return;
        const T s = self.grad[0] / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            const T onehot = static_cast<std::size_t>(targets[r]) == c ? T{1} : T{0};
            g[r * cols + c] += s * (probs[r * cols + c] - onehot);
          }
        }
      });
}

// --- indexing and layout --------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(shape.numel() == x.numel(), "reshape: " + x.shape().str() + " -> " + shape.str());
  std::vector<T> out(x.data().begin(), x.data().end());
  return Tensor<T>::make_result(shape, std::move(out), {x}, [](TensorNode<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.data.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t cols = x.shape().back();
  require(begin <= end && end <= cols, "slice_last: range out of bounds");
  const std::size_t rows = row_count(x), width = end - begin;
  Shape shape = x.rank() == 3   ? Shape{x.dim(0), x.dim(1), width}
                : x.rank() == 2 ? Shape{x.dim(0), width}
                                : Shape{width};
  std::vector<T> out(rows * width);
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(v.data() + r * cols + begin, width, out.data() + r * width);
  }
  return Tensor<T>::make_result(shape, std::move(out), {x}, [rows, cols, begin, width](TensorNode<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < width; ++c) g[r * cols + begin + c] += self.grad[r * width + c];
      }
    }
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require(x.rank() == 2 && begin <= end && end <= x.dim(0), "slice_rows: range out of bounds");
  const std::size_t cols = x.dim(1);
  std::vector<T> out(x.data().begin() + begin * cols, x.data().begin() + end * cols);
  return Tensor<T>::make_result(Shape{end - begin, cols}, std::move(out), {x},
                                [offset = begin * cols](TensorNode<T>& self) {
                                  if (T* g = parent_grad(self, 0)) {
                                    for (std::size_t i = 0; i < self.data.size(); ++i) {
                                      g[offset + i] += self.grad[i];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> slice_seq(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require(x.rank() == 3 && begin <= end && end <= x.dim(1), "slice_seq: range out of bounds");
  const std::size_t batch = x.dim(0), len = x.dim(1), cols = x.dim(2), width = end - begin;
  std::vector<T> out(batch * width * cols);
  auto v = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(v.data() + (b * len + begin) * cols, width * cols, out.data() + b * width * cols);
  }
  return Tensor<T>::make_result(Shape{batch, width, cols}, std::move(out), {x},
                                [batch, len, cols, begin, width](TensorNode<T>& self) {
                                  T* g = parent_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t b = 0; b < batch; ++b) {
                                    const T* src = self.grad.data() + b * width * cols;
                                    T* dst = g + (b * len + begin) * cols;
                                    for (std::size_t i = 0; i < width * cols; ++i) dst[i] += src[i];
                                  }
                                });
}

template <typename T>
Tensor<T> concat_seq(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
          "concat_seq: " + a.shape().str() + " with " + b.shape().str());
  const std::size_t batch = a.dim(0), la = a.dim(1), lb = b.dim(1), cols = a.dim(2);
  const std::size_t len = la + lb;
  std::vector<T> out(batch * len * cols);
  for (std::size_t i = 0; i < batch; ++i) {
    std::copy_n(a.data().data() + i * la * cols, la * cols, out.data() + i * len * cols);
    std::copy_n(b.data().data() + i * lb * cols, lb * cols, out.data() + (i * len + la) * cols);
  }
  return Tensor<T>::make_result(Shape{batch, len, cols}, std::move(out), {a, b},
                                [batch, la, lb, cols, len](TensorNode<T>& self) {
                                  T* ga = parent_grad(self, 0);
                                  T* gb = parent_grad(self, 1);
                                  for (std::size_t i = 0; i < batch; ++i) {
                                    const T* src = self.grad.data() + i * len * cols;
                                    if (ga) {
                                      for (std::size_t j = 0; j < la * cols; ++j) ga[i * la * cols + j] += src[j];
                                    }
                                    if (gb) {
                                      for (std::size_t j = 0; j < lb * cols; ++j) {
                                        gb[i * lb * cols + j] += src[la * cols + j];
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_rows: nothing to concatenate");
  const std::size_t cols = parts.front().shape().back();
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.dim(1) == cols, "concat_rows: column mismatch");
    offsets.push_back(rows * cols);
    rows += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor<T>::make_result(Shape{rows, cols}, std::move(out), parts,
                                [offsets = std::move(offsets)](TensorNode<T>& self) {
                                  for (std::size_t p = 0; p < offsets.size(); ++p) {
                                    if (T* g = parent_grad(self, p)) {
                                      const std::size_t n = self.parents[p]->data.size();
                                      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offsets[p] + i];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx) {
  require(x.rank() == 2, "gather_rows expects a 2-D tensor");
  const std::size_t cols = x.dim(1);
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  std::vector<T> out(rows.size() * cols);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    require(rows[k] < x.dim(0), "gather_rows: index out of range");
    std::copy_n(x.data().data() + rows[k] * cols, cols, out.data() + k * cols);
  }
  return Tensor<T>::make_result(Shape{rows.size(), cols}, std::move(out), {x},
                                [cols, rows](TensorNode<T>& self) {
                                  if (T* g = parent_grad(self, 0)) {
                                    for (std::size_t k = 0; k < rows.size(); ++k) {
                                      for (std::size_t c = 0; c < cols; ++c) {
                                        g[rows[k] * cols + c] += self.grad[k * cols + c];
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::size_t> idx) {
  std::vector<std::size_t> at(idx.begin(), idx.end());
  std::vector<T> out(at.size());
  for (std::size_t k = 0; k < at.size(); ++k) {
    require(at[k] < x.numel(), "gather: index out of range");
    out[k] = x.data()[at[k]];
  }
  return Tensor<T>::make_result(Shape{1, at.size()}, std::move(out), {x}, [at](TensorNode<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t k = 0; k < at.size(); ++k) g[at[k]] += self.grad[k];
    }
  });
}

template <typename T>
Tensor<T> select_batch(const Tensor<T>& x, std::size_t i) {
  require(x.rank() == 3 && i < x.dim(0), "select_batch: index out of range");
  const std::size_t block = x.dim(1) * x.dim(2);
  std::vector<T> out(x.data().begin() + i * block, x.data().begin() + (i + 1) * block);
  return Tensor<T>::make_result(Shape{x.dim(1), x.dim(2)}, std::move(out), {x},
                                [offset = i * block](TensorNode<T>& self) {
                                  if (T* g = parent_grad(self, 0)) {
                                    for (std::size_t j = 0; j < self.data.size(); ++j) {
                                      g[offset + j] += self.grad[j];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> pick_seq(const Tensor<T>& x, std::size_t r) {
  require(x.rank() == 3 && r < x.dim(1), "pick_seq: position out of range");
  const std::size_t batch = x.dim(0), len = x.dim(1), cols = x.dim(2);
  std::vector<T> out(batch * cols);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(x.data().data() + (b * len + r) * cols, cols, out.data() + b * cols);
  }
  return Tensor<T>::make_result(Shape{batch, cols}, std::move(out), {x},
                                [batch, len, cols, r](TensorNode<T>& self) {
                                  if (T* g = parent_grad(self, 0)) {
                                    for (std::size_t b = 0; b < batch; ++b) {
                                      for (std::size_t c = 0; c < cols; ++c) {
                                        g[(b * len + r) * cols + c] += self.grad[b * cols + c];
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> stack_padded(const std::vector<Tensor<T>>& parts, std::size_t length, std::size_t cols) {
  const std::size_t batch = parts.size();
  std::vector<std::size_t> rows(batch);
  std::vector<T> out(batch * length * cols, T{0});
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& p = parts[b];
    require(p.rank() == 2 && p.dim(1) == cols && p.dim(0) <= length, "stack_padded: bad part shape");
    rows[b] = p.dim(0);
    std::copy(p.data().begin(), p.data().end(), out.begin() + b * length * cols);
  }
  return Tensor<T>::make_result(Shape{batch, length, cols}, std::move(out), parts,
                                [rows = std::move(rows), length, cols](TensorNode<T>& self) {
                                  for (std::size_t b = 0; b < rows.size(); ++b) {
                                    if (T* g = parent_grad(self, b)) {
                                      const T* src = self.grad.data() + b * length * cols;
                                      for (std::size_t i = 0; i < rows[b] * cols; ++i) g[i] += src[i];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  require(x.rank() == 3 && heads > 0 && x.dim(2) % heads == 0, "split_heads: bad shape");
  const std::size_t batch = x.dim(0), len = x.dim(1), width = x.dim(2), dh = width / heads;
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t l = 0; l < len; ++l) {
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(v.data() + (b * len + l) * width + h * dh, dh,
                    out.data() + ((b * heads + h) * len + l) * dh);
      }
    }
  }
  return Tensor<T>::make_result(Shape{batch * heads, len, dh}, std::move(out), {x},
                                [batch, len, width, heads, dh](TensorNode<T>& self) {
                                  T* g = parent_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t b = 0; b < batch; ++b) {
                                    for (std::size_t l = 0; l < len; ++l) {
                                      for (std::size_t h = 0; h < heads; ++h) {
                                        const T* src = self.grad.data() + ((b * heads + h) * len + l) * dh;
                                        T* dst = g + (b * len + l) * width + h * dh;
                                        for (std::size_t c = 0; c < dh; ++c) dst[c] += src[c];
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
  require(x.rank() == 3 && heads > 0 && x.dim(0) % heads == 0, "merge_heads: bad shape");
  const std::size_t batch = x.dim(0) / heads, len = x.dim(1), dh = x.dim(2), width = dh * heads;
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t l = 0; l < len; ++l) {
        std::copy_n(v.data() + ((b * heads + h) * len + l) * dh, dh,
                    out.data() + (b * len + l) * width + h * dh);
      }
    }
  }
  return Tensor<T>::make_result(Shape{batch, len, width}, std::move(out), {x},
                                [batch, len, width, heads, dh](TensorNode<T>& self) {
                                  T* g = parent_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t b = 0; b < batch; ++b) {
                                    for (std::size_t h = 0; h < heads; ++h) {
                                      for (std::size_t l = 0; l < len; ++l) {
                                        const T* src = self.grad.data() + (b * len + l) * width + h * dh;
                                        T* dst = g + ((b * heads + h) * len + l) * dh;
                                        for (std::size_t c = 0; c < dh; ++c) dst[c] += src[c];
                                      }
                                    }
                                  }
                                });
}

#define ADATAPE_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> scale_by(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                           \
  template Tensor<T> mul_const(const Tensor<T>&, std::span<const T>);                           \
  template Tensor<T> gelu(const Tensor<T>&);                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> add_broadcast_batch(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> broadcast_batch(const Tensor<T>&, std::size_t);                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> bmm_nt(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> softmax(const Tensor<T>&, T);                                              \
  template Tensor<T> masked_softmax(const Tensor<T>&, std::span<const std::uint8_t>,            \
                                    std::size_t, T);                                            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> mean_rows(const Tensor<T>&);                                               \
  template Tensor<T> mean_seq(const Tensor<T>&);                                                \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> slice_last(const Tensor<T>&, std::size_t, std::size_t);                    \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                    \
  template Tensor<T> slice_seq(const Tensor<T>&, std::size_t, std::size_t);                     \
  template Tensor<T> concat_seq(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);               \
  template Tensor<T> gather(const Tensor<T>&, std::span<const std::size_t>);                    \
  template Tensor<T> select_batch(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> pick_seq(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> stack_padded(const std::vector<Tensor<T>>&, std::size_t, std::size_t);     \
  template Tensor<T> split_heads(const Tensor<T>&, std::size_t);                                \
  template Tensor<T> merge_heads(const Tensor<T>&, std::size_t);

ADATAPE_INSTANTIATE_OPS(float)
ADATAPE_INSTANTIATE_OPS(double)

#undef ADATAPE_INSTANTIATE_OPS

}  // namespace adatape

// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks of every differentiable primitive, shared by the
// unit tests and the acceptance run.
#pragma once

#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "adatape/grad_check.hpp"
#include "adatape/ops.hpp"

namespace primitive_checks {

using adatape::Shape;
using adatape::Tensor;
using V = std::vector<Tensor<double>>;

inline Tensor<double> randn(Shape shape, adatape::Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(shape.numel());
  for (double& x : v) x = n(rng);
  return Tensor<double>::from_vector(shape, v);
}

// Grad-checks f over freshly registered inputs, contracting the output with
// fixed random weights so every output element carries a distinct upstream
// gradient.
inline double check_op(const V& inputs, const std::function<Tensor<double>(const V&)>& f) {
  adatape::ParamStore<double> params;
  V regs;
  for (std::size_t i = 0; i < inputs.size(); ++i) regs.push_back(params.add("x" + std::to_string(i), inputs[i]));
  adatape::Rng rng(99);
  std::vector<double> w;
  {
    adatape::NoGradGuard g;
    Tensor<double> probe = f(regs);
    w.resize(probe.numel());
    std::normal_distribution<double> n;
    for (double& v : w) v = n(rng);
  }
  adatape::LossFn loss = [&](adatape::ParamStore<double>&) {
    return adatape::sum(adatape::mul_const<double>(f(regs), w));
  };
  adatape::GradCheckOptions opt;
  opt.delta = 1e-5;
  return adatape::grad_check(loss, params, opt).max_rel_error;
}

// (primitive name, max relative error) for every op.
inline std::vector<std::pair<std::string, double>> all_primitives() {
  using namespace adatape;
  Rng rng(4);
  auto a = randn(Shape{3, 4}, rng), b = randn(Shape{3, 4}, rng), m = randn(Shape{4, 5}, rng);
  auto n = randn(Shape{5, 4}, rng), bias = randn(Shape{4}, rng), s = randn(Shape{}, rng);
  auto b3 = randn(Shape{2, 3, 4}, rng), c3 = randn(Shape{2, 4, 3}, rng), d3 = randn(Shape{2, 5, 4}, rng);
  auto gamma = randn(Shape{4}, rng), beta = randn(Shape{4}, rng);
  const std::vector<std::uint8_t> valid = {1, 1, 0, 1, 1, 1, 1, 0};
  auto scores = randn(Shape{4, 3, 4}, rng);
  const int labels[] = {1, 3, 0};

  std::vector<std::pair<std::string, double>> out;
  auto run = [&](const std::string& name, const V& in, const std::function<Tensor<double>(const V&)>& f) {
    out.emplace_back(name, check_op(in, f));
  };
  run("add", {a, b}, [](const V& x) { return add(x[0], x[1]); });
  run("sub", {a, b}, [](const V& x) { return sub(x[0], x[1]); });
  run("mul", {a, b}, [](const V& x) { return mul(x[0], x[1]); });
  run("scale", {a}, [](const V& x) { return scale(x[0], 1.7); });
  run("scale_by", {a, s}, [](const V& x) { return scale_by(x[0], x[1]); });
  run("add_scalar", {a}, [](const V& x) { return add_scalar(x[0], 0.3); });
  run("gelu", {a}, [](const V& x) { return gelu(x[0]); });
  run("sigmoid", {a}, [](const V& x) { return sigmoid(x[0]); });
  run("add_bias", {a, bias}, [](const V& x) { return add_bias(x[0], x[1]); });
  run("add_broadcast_batch", {b3, a}, [](const V& x) { return add_broadcast_batch(x[0], x[1]); });
  run("broadcast_batch", {a}, [](const V& x) { return broadcast_batch(x[0], 3); });
  run("matmul", {a, m}, [](const V& x) { return matmul(x[0], x[1]); });
  run("matmul_batched", {b3, m}, [](const V& x) { return matmul(x[0], x[1]); });
  run("matmul_nt", {a, n}, [](const V& x) { return matmul_nt(x[0], x[1]); });
  run("bmm", {b3, c3}, [](const V& x) { return bmm(x[0], x[1]); });
  run("bmm_nt", {b3, d3}, [](const V& x) { return bmm_nt(x[0], x[1]); });
  run("softmax", {a}, [](const V& x) { return softmax(x[0], 2.0); });
  run("layer_norm", {a, gamma, beta}, [](const V& x) { return layer_norm(x[0], x[1], x[2], 1e-6); });
  run("sum", {a}, [](const V& x) { return sum(x[0]); });
  run("mean", {a}, [](const V& x) { return mean(x[0]); });
  run("mean_rows", {a}, [](const V& x) { return mean_rows(x[0]); });
  run("mean_seq", {b3}, [](const V& x) { return mean_seq(x[0]); });
  run("reshape", {a}, [](const V& x) { return reshape(x[0], Shape{2, 6}); });
  run("slice_last", {a}, [](const V& x) { return slice_last(x[0], 1, 3); });
  run("slice_rows", {a}, [](const V& x) { return slice_rows(x[0], 1, 3); });
  run("slice_seq", {b3}, [](const V& x) { return slice_seq(x[0], 1, 3); });
  run("concat_seq", {b3, b3}, [](const V& x) { return concat_seq(x[0], x[1]); });
  run("concat_rows", {a, b}, [](const V& x) { return concat_rows(V{x[0], x[1]}); });
  run("gather_rows", {a}, [](const V& x) {
    const std::size_t idx[] = {2, 0};
    return gather_rows(x[0], idx);
  });
  run("gather", {a}, [](const V& x) {
    const std::size_t idx[] = {5, 1, 11};
    return gather(x[0], idx);
  });
  run("select_batch", {b3}, [](const V& x) { return select_batch(x[0], 1); });
  run("pick_seq", {b3}, [](const V& x) { return pick_seq(x[0], 2); });
  run("stack_padded", {a, b}, [](const V& x) { return stack_padded(V{x[0], slice_rows(x[1], 0, 1)}, 4, 4); });
  run("merge_heads", {b3}, [](const V& x) { return merge_heads(split_heads(x[0], 2), 2); });
  run("split_heads", {b3}, [](const V& x) { return split_heads(x[0], 2); });
  run("masked_softmax", {scores}, [&](const V& x) { return masked_softmax(x[0], valid, 2, 1.5); });
  run("cross_entropy", {a}, [&](const V& x) { return cross_entropy(x[0], labels); });
  return out;
}

}  // namespace primitive_checks

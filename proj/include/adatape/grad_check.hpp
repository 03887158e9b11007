// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "adatape/params.hpp"

namespace adatape {

struct GradCheckOptions {
  double delta = 1e-4;
  double tol = 1e-3;
  // Number of (parameter, element) pairs to probe; 0 probes every element.
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  // Denominator floor so that two near-zero gradients compare by absolute error.
  double abs_floor = 1e-6;
};

struct ParamCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  bool passed = true;
};

using LossFn = std::function<Tensor<double>(ParamStore<double>&)>;

// Central finite differences against the reverse-mode gradient. The loss is
// evaluated twice up front; differing values raise NumericError.
GradCheckReport grad_check(const LossFn& loss_fn, ParamStore<double>& params, const GradCheckOptions& options);

}  // namespace adatape

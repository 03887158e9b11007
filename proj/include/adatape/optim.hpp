// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "adatape/params.hpp"

namespace adatape {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// First and second moments, one buffer per parameter in registration order.
template <typename T>
struct OptimState {
  AdamWConfig hp;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

// Decoupled-weight-decay Adam update. Increments the store's step counter and
// clears all gradients. Throws ConfigError naming any parameter without one.
template <typename T>
void adamw_step(ParamStore<T>& params, OptimState<T>& state);

enum class LrSchedule { kConstant, kCosine };

// Linear warmup to base_lr over warmup_steps, then constant or cosine decay to
// zero at total_steps. step is zero-based.
double scheduled_lr(double base_lr, std::int64_t step, std::int64_t warmup_steps,
                    std::int64_t total_steps, LrSchedule schedule);

}  // namespace adatape

// SPDX-License-Identifier: Apache-2.0
#include "adatape/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace adatape {

template <typename T>
void adamw_step(ParamStore<T>& params, OptimState<T>& state) {
  const auto entries = params.entries();
  if (state.first_moment.empty()) {
    for (const auto& e : entries) {
      state.first_moment.emplace_back(e.value.numel(), T{0});
      state.second_moment.emplace_back(e.value.numel(), T{0});
    }
  }
  if (state.first_moment.size() != entries.size()) {
    throw ShapeError("optimizer state tracks " + std::to_string(state.first_moment.size()) +
                     " parameters, store has " + std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (state.first_moment[i].size() != entries[i].value.numel()) {
      throw ShapeError("optimizer moments do not match parameter " + entries[i].name);
    }
    if (!entries[i].value.has_grad()) throw ConfigError("missing gradient for parameter " + entries[i].name);
  }

  const auto& hp = state.hp;
  const double t = static_cast<double>(params.step() + 1);
  const double correction1 = 1.0 - std::pow(hp.beta1, t);
  const double correction2 = 1.0 - std::pow(hp.beta2, t);
  const T b1 = static_cast<T>(hp.beta1), b2 = static_cast<T>(hp.beta2);
  const T lr = static_cast<T>(hp.lr), wd = static_cast<T>(hp.weight_decay), eps = static_cast<T>(hp.eps);

  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor<T> p = entries[i].value;
    auto values = p.data();
    auto grad = p.grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * grad[j];
      v[j] = b2 * v[j] + (T{1} - b2) * grad[j] * grad[j];
      const T m_hat = m[j] / static_cast<T>(correction1);
      const T v_hat = v[j] / static_cast<T>(correction2);
      values[j] -= lr * wd * values[j];
      values[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
  params.set_step(params.step() + 1);
  params.zero_grad();
}

double scheduled_lr(double base_lr, std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps,
                    LrSchedule schedule) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  if (schedule == LrSchedule::kConstant) return base_lr;
  const double span = static_cast<double>(std::max<std::int64_t>(1, total_steps - warmup_steps));
  const double progress = std::clamp(static_cast<double>(step - warmup_steps) / span, 0.0, 1.0);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template void adamw_step(ParamStore<float>&, OptimState<float>&);
template void adamw_step(ParamStore<double>&, OptimState<double>&);

}  // namespace adatape

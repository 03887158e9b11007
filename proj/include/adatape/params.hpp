// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "adatape/errors.hpp"
#include "adatape/tensor.hpp"

namespace adatape {

using Rng = std::mt19937_64;

// Named trainable tensors in registration order, plus the optimizer step count.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  Tensor<T> add(std::string name, Tensor<T> value) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    value.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), value});
    return value;
  }

  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  Tensor<T> get(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
    return entries_[it->second].value;
  }

  std::span<const Entry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  std::int64_t step() const { return step_; }
  void set_step(std::int64_t step) { step_ = step; }

  // Same names and values in another precision, with fresh gradient state.
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) {
      std::vector<U> values(e.value.data().begin(), e.value.data().end());
      out.add(e.name, Tensor<U>::from_vector(e.value.shape(), std::move(values)));
    }
    out.set_step(step_);
    return out;
  }

  // Overwrite values (not graph state) from a store with identical layout.
  template <typename U>
  void copy_values_from(const ParamStore<U>& other) {
    for (auto& e : entries_) {
      Tensor<U> src = other.get(e.name);
      if (!(src.shape() == e.value.shape())) {
        throw ShapeError("parameter " + e.name + ": shape " + src.shape().str() + " vs " +
                         e.value.shape().str());
      }
      auto dst = e.value.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src.data()[i]);
    }
    step_ = other.step();
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::int64_t step_ = 0;
};

// Initializers draw in double so float and double models built from the same
// seed agree up to rounding.

template <typename T>
Tensor<T> truncated_normal(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> values(shape.numel());
  for (T& v : values) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    v = static_cast<T>(z * stddev);
  }
  return Tensor<T>::from_vector(shape, std::move(values));
}

// Glorot uniform for a [fan_in, fan_out] kernel.
template <typename T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> uniform(-limit, limit);
  std::vector<T> values(fan_in * fan_out);
  for (T& v : values) v = static_cast<T>(uniform(rng));
  return Tensor<T>::from_vector(Shape{fan_in, fan_out}, std::move(values));
}

}  // namespace adatape

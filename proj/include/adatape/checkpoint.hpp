// SPDX-License-Identifier: Apache-2.0
//
// Flat binary checkpoint:
//   "ATKP" | version u32 | count u32 |
//   per entry: name_len u16 | UTF-8 name | rank u8 | dims u32 x rank | f32 x numel
// All integers and floats are little-endian.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "adatape/params.hpp"

namespace adatape {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

std::vector<std::uint8_t> encode_checkpoint(std::span<const CheckpointEntry> entries);
std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointEntry> entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

// A text document stored as one f32 per byte in a rank-1 entry.
CheckpointEntry text_entry(std::string name, std::string_view text);
std::string entry_text(const CheckpointEntry& entry);
const CheckpointEntry* find_entry(std::span<const CheckpointEntry> entries, std::string_view name);

template <typename T>
std::vector<CheckpointEntry> to_entries(const ParamStore<T>& params) {
  std::vector<CheckpointEntry> out;
  for (const auto& e : params.entries()) {
    CheckpointEntry entry{e.name, {}, {}};
    for (std::size_t d = 0; d < e.value.rank(); ++d) entry.dims.push_back(static_cast<std::uint32_t>(e.value.dim(d)));
    entry.values.assign(e.value.data().begin(), e.value.data().end());
    out.push_back(std::move(entry));
  }
  return out;
}

// Loads every parameter of the store from the entries. Missing entries and
// shape mismatches are collected and reported together in one ShapeError.
template <typename T>
void load_entries(ParamStore<T>& params, std::span<const CheckpointEntry> entries) {
  std::string problems;
  for (const auto& e : params.entries()) {
    const CheckpointEntry* src = find_entry(entries, e.name);
    if (!src) {
      problems += "\n  missing: " + e.name;
      continue;
    }
    bool same = src->dims.size() == e.value.rank();
    for (std::size_t d = 0; same && d < src->dims.size(); ++d) same = src->dims[d] == e.value.dim(d);
    if (!same) {
      std::string dims = "[";
      for (std::size_t d = 0; d < src->dims.size(); ++d) dims += (d ? ", " : "") + std::to_string(src->dims[d]);
      problems += "\n  shape mismatch: " + e.name + " checkpoint " + dims + "] vs model " + e.value.shape().str();
    }
  }
  if (!problems.empty()) throw ShapeError("checkpoint does not match model:" + problems);
  for (const auto& e : params.entries()) {
    const CheckpointEntry* src = find_entry(entries, e.name);
    Tensor<T> dst = e.value;
    auto values = dst.data();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(src->values[i]);
  }
}

}  // namespace adatape

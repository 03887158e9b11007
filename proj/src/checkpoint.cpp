// SPDX-License-Identifier: Apache-2.0
#include "adatape/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "adatape/errors.hpp"
#include "adatape/io.hpp"

namespace adatape {
namespace {

constexpr char kMagic[4] = {'A', 'T', 'K', 'P'};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    auto b = take(2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(std::span<const CheckpointEntry> entries) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) throw FormatError("checkpoint entry name too long: " + e.name);
    if (e.dims.size() > 0xFF) throw FormatError("checkpoint entry rank too large: " + e.name);
    std::size_t numel = 1;
    for (auto d : e.dims) numel *= d;
    if (numel != e.values.size()) throw FormatError("checkpoint entry " + e.name + " has inconsistent dims");
    put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) put_u32(out, d);
    for (float v : e.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  auto magic = in.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("not an ATKP checkpoint (bad magic)");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = in.u32();
  std::vector<CheckpointEntry> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint16_t len = in.u16();
    auto name = in.take(len);
    e.name.assign(name.begin(), name.end());
    const std::uint8_t rank = in.u8();
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      e.dims.push_back(in.u32());
      numel *= e.dims.back();
    }
    e.values.resize(numel);
    for (float& v : e.values) v = std::bit_cast<float>(in.u32());
    out.push_back(std::move(e));
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint entries");
  return out;
}

void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointEntry> entries) {
  write_file_atomic(path, encode_checkpoint(entries));
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

CheckpointEntry text_entry(std::string name, std::string_view text) {
  CheckpointEntry e{std::move(name), {static_cast<std::uint32_t>(text.size())}, {}};
  e.values.reserve(text.size());
  for (char c : text) e.values.push_back(static_cast<float>(static_cast<unsigned char>(c)));
  return e;
}

std::string entry_text(const CheckpointEntry& entry) {
  std::string out;
  out.reserve(entry.values.size());
  for (float v : entry.values) {
    if (v < 0.0f || v > 255.0f || v != static_cast<float>(static_cast<int>(v))) {
      throw FormatError("entry " + entry.name + " does not hold text");
    }
    out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return out;
}

const CheckpointEntry* find_entry(std::span<const CheckpointEntry> entries, std::string_view name) {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

}  // namespace adatape

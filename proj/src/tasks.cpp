// SPDX-License-Identifier: Apache-2.0
#include "adatape/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "adatape/errors.hpp"
#include "adatape/io.hpp"

namespace adatape {

int parity_label(std::span<const int> symbols) {
  return static_cast<int>(std::count(symbols.begin(), symbols.end(), 1) % 2);
}

std::vector<ParitySample> gen_parity(std::size_t length, std::size_t count, std::uint64_t seed) {
  if (length == 0) throw ConfigError("parity length must be at least 1");
  Rng rng(seed);
  std::uniform_int_distribution<int> symbol(-1, 1);
  std::vector<ParitySample> out(count);
  for (auto& s : out) {
    s.symbols.resize(length);
    for (int& v : s.symbols) v = symbol(rng);
    s.label = parity_label(s.symbols);
  }
  return out;
}

std::string parity_csv(std::span<const ParitySample> samples) {
  std::string out;
  for (const auto& s : samples) {
    for (int v : s.symbols) out += std::to_string(v) + ",";
    out += std::to_string(s.label) + "\n";
  }
  return out;
}

std::vector<ParitySample> parse_parity_csv(const std::string& text) {
  std::vector<ParitySample> out;
  std::istringstream lines(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<int> values;
    std::istringstream fields(line);
    std::string field;
    while (std::getline(fields, field, ',')) {
      try {
        std::size_t used = 0;
        values.push_back(std::stoi(field, &used));
        if (used != field.size()) throw std::invalid_argument(field);
      } catch (const std::logic_error&) {
        throw FormatError("parity csv line " + std::to_string(line_no) + ": bad field '" + field + "'");
      }
    }
    if (values.size() < 2) throw FormatError("parity csv line " + std::to_string(line_no) + ": too few fields");
    ParitySample s;
    s.label = values.back();
    values.pop_back();
    for (int v : values) {
      if (v < -1 || v > 1) throw FormatError("parity csv line " + std::to_string(line_no) + ": bad symbol");
    }
    s.symbols = std::move(values);
    if (s.label != parity_label(s.symbols)) {
      throw FormatError("parity csv line " + std::to_string(line_no) + ": label does not match symbols");
    }
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t at) {
  return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
         (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

}  // namespace

IdxFile parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw LengthError("idx: file shorter than its magic number");
  const std::uint32_t magic = read_be32(bytes, 0);
  if ((magic & 0xFFFFFF00u) != 0x00000800u || (magic & 0xFFu) == 0) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08X", magic);
    throw FormatError(std::string("idx: bad magic ") + buf);
  }
  const std::size_t rank = magic & 0xFFu;
  if (bytes.size() < 4 + 4 * rank) throw LengthError("idx: truncated dimension header");
  IdxFile file;
  std::size_t expected = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    file.dims.push_back(read_be32(bytes, 4 + 4 * i));
    expected *= file.dims.back();
  }
  const std::size_t offset = 4 + 4 * rank;
  const std::size_t available = bytes.size() - offset;
  if (available < expected) {
    throw LengthError("idx: payload has " + std::to_string(available) + " bytes, header promises " +
                      std::to_string(expected));
  }
  if (available > expected) throw LengthError("idx: " + std::to_string(available - expected) + " trailing bytes");
  file.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  return file;
}

std::vector<std::uint8_t> encode_idx(const IdxFile& file) {
  if (file.dims.empty() || file.dims.size() > 255) throw ConfigError("idx: rank must be in [1, 255]");
  std::size_t expected = 1;
  for (auto d : file.dims) expected *= d;
  if (expected != file.values.size()) throw ShapeError("idx: dims do not match value count");
  std::vector<std::uint8_t> out;
  write_be32(out, 0x00000800u | static_cast<std::uint32_t>(file.dims.size()));
  for (auto d : file.dims) write_be32(out, d);
  out.insert(out.end(), file.values.begin(), file.values.end());
  return out;
}

IdxFile load_idx(const std::filesystem::path& path) {
  try {
    return parse_idx(read_file(path));
  } catch (const LengthError& e) {
    throw LengthError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

ImageSet load_image_set(const std::filesystem::path& images, const std::filesystem::path& labels) {
  IdxFile img = load_idx(images);
  IdxFile lab = load_idx(labels);
  if (img.dims.size() != 3 || img.dims[1] != img.dims[2]) {
    throw FormatError(images.string() + ": expected square images of rank 3");
  }
  if (lab.dims.size() != 1) throw FormatError(labels.string() + ": expected a rank-1 label file");
  if (lab.dims[0] != img.dims[0]) {
    throw ShapeError("image count " + std::to_string(img.dims[0]) + " does not match label count " +
                     std::to_string(lab.dims[0]));
  }
  ImageSet set;
  set.count = img.dims[0];
  set.width = img.dims[1];
  set.pixels.reserve(img.values.size());
  for (auto v : img.values) set.pixels.push_back(static_cast<double>(v) / 255.0);
  set.labels.assign(lab.values.begin(), lab.values.end());
  return set;
}

void write_image_set(const ImageSet& set, const std::filesystem::path& images, const std::filesystem::path& labels) {
  if (set.pixels.size() != set.count * set.width * set.width || set.labels.size() != set.count) {
    throw ShapeError("image set arrays do not match its count and width");
  }
  IdxFile img{{static_cast<std::uint32_t>(set.count), static_cast<std::uint32_t>(set.width),
               static_cast<std::uint32_t>(set.width)},
              {}};
  img.values.reserve(set.pixels.size());
  for (double p : set.pixels) img.values.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0)));
  IdxFile lab{{static_cast<std::uint32_t>(set.count)}, {}};
  for (int l : set.labels) {
    if (l < 0 || l > 255) throw ConfigError("label " + std::to_string(l) + " does not fit in a byte");
    lab.values.push_back(static_cast<std::uint8_t>(l));
  }
  write_file_atomic(images, encode_idx(img));
  write_file_atomic(labels, encode_idx(lab));
}

namespace {

void check_patch(std::size_t width, std::size_t patch) {
  if (patch == 0 || width == 0 || width % patch != 0) {
    throw ConfigError("patch size " + std::to_string(patch) + " does not divide image width " +
                      std::to_string(width));
  }
}

}  // namespace

std::vector<double> patchify(std::span<const double> image, std::size_t width, std::size_t patch) {
  check_patch(width, patch);
  if (image.size() != width * width) throw ShapeError("patchify: image is not width x width");
  const std::size_t grid = width / patch;
  std::vector<double> out(image.size());
  std::size_t o = 0;
  for (std::size_t gr = 0; gr < grid; ++gr) {
    for (std::size_t gc = 0; gc < grid; ++gc) {
      for (std::size_t r = 0; r < patch; ++r) {
        for (std::size_t c = 0; c < patch; ++c) out[o++] = image[(gr * patch + r) * width + gc * patch + c];
      }
    }
  }
  return out;
}

std::vector<double> unpatchify(std::span<const double> patches, std::size_t width, std::size_t patch) {
  check_patch(width, patch);
  if (patches.size() != width * width) throw ShapeError("unpatchify: wrong number of values");
  const std::size_t grid = width / patch;
  std::vector<double> out(patches.size());
  std::size_t o = 0;
  for (std::size_t gr = 0; gr < grid; ++gr) {
    for (std::size_t gc = 0; gc < grid; ++gc) {
      for (std::size_t r = 0; r < patch; ++r) {
        for (std::size_t c = 0; c < patch; ++c) out[(gr * patch + r) * width + gc * patch + c] = patches[o++];
      }
    }
  }
  return out;
}

ImageSet synthetic_images(std::size_t count, std::size_t width, std::size_t classes, std::uint64_t seed) {
  if (width < 8) throw ConfigError("synthetic images need width >= 8");
  if (classes == 0 || classes > 10) throw ConfigError("synthetic images support 1 to 10 classes");
  Rng rng(seed);
  std::uniform_int_distribution<int> label_dist(0, static_cast<int>(classes) - 1);
  std::uniform_int_distribution<int> jitter(-2, 2);
  std::uniform_real_distribution<double> brightness(0.6, 1.0);
  std::normal_distribution<double> noise(0.0, 0.08);

  ImageSet set;
  set.count = count;
  set.width = width;
  set.pixels.assign(count * width * width, 0.0);
  set.labels.resize(count);
  const int w = static_cast<int>(width);
  const int size = w / 4;
  for (std::size_t n = 0; n < count; ++n) {
    const int label = label_dist(rng);
    set.labels[n] = label;
    // Shape family from label % 5, placement from label / 5.
    const int shape = label % 5;
    const int cy = (label / 5 == 0 ? w / 3 : 2 * w / 3) + jitter(rng);
    const int cx = (label / 5 == 0 ? w / 3 : 2 * w / 3) + jitter(rng);
    const double level = brightness(rng);
    double* img = set.pixels.data() + n * width * width;
    for (int y = 0; y < w; ++y) {
      for (int x = 0; x < w; ++x) {
        const int dy = y - cy, dx = x - cx;
        bool on = false;
        switch (shape) {
          case 0: on = std::abs(dy) <= size / 2 && std::abs(dx) <= size / 2; break;
          case 1: on = std::abs(dy) <= 1 && std::abs(dx) <= size; break;
          case 2: on = std::abs(dx) <= 1 && std::abs(dy) <= size; break;
          case 3: on = std::abs(dy - dx) <= 1 && std::abs(dx) <= size; break;
          default: {
            const double r = std::sqrt(static_cast<double>(dx * dx + dy * dy));
            on = r >= size - 1.5 && r <= size + 0.5;
          }
        }
        const double v = std::clamp((on ? level : 0.0) + noise(rng), 0.0, 1.0);
        img[y * w + x] = std::round(v * 255.0) / 255.0;
      }
    }
  }
  return set;
}

namespace {

void one_hot_symbols(std::span<const int> symbols, std::vector<double>& out) {
  for (int v : symbols) {
    if (v < -1 || v > 1) throw ConfigError("parity symbol out of range: " + std::to_string(v));
    const std::size_t base = out.size();
    out.resize(base + kParitySymbolDim, 0.0);
    out[base + static_cast<std::size_t>(v + 1)] = 1.0;
  }
}

std::size_t common_length(std::span<const ParitySample> samples) {
  if (samples.empty()) throw ShapeError("empty parity batch");
  const std::size_t n = samples.front().symbols.size();
  for (const auto& s : samples) {
    if (s.symbols.size() != n) throw ShapeError("parity batch mixes sequence lengths");
  }
  return n;
}

}  // namespace

Batch parity_bank_batch(std::span<const ParitySample> samples) {
  Batch b;
  b.size = samples.size();
  b.bank_len = common_length(samples);
  b.bank_dim = kParitySymbolDim;
  b.input_dim = kParitySymbolDim;
  for (const auto& s : samples) {
    one_hot_symbols(s.symbols, b.bank_tokens);
    b.labels.push_back(s.label);
  }
  return b;
}

Batch parity_token_batch(std::span<const ParitySample> samples) {
  Batch b;
  b.size = samples.size();
  b.input_len = common_length(samples);
  b.input_dim = kParitySymbolDim;
  for (const auto& s : samples) {
    one_hot_symbols(s.symbols, b.inputs);
    b.labels.push_back(s.label);
  }
  return b;
}

Batch image_batch(const ImageSet& set, std::span<const std::size_t> indices, std::size_t input_patch,
                  std::size_t bank_patch) {
  check_patch(set.width, input_patch);
  check_patch(set.width, bank_patch);
  if (bank_patch >= input_patch) throw ConfigError("bank patch must be smaller than the input patch");
  Batch b;
  b.size = indices.size();
  b.input_len = (set.width / input_patch) * (set.width / input_patch);
  b.input_dim = input_patch * input_patch;
  b.bank_len = (set.width / bank_patch) * (set.width / bank_patch);
  b.bank_dim = bank_patch * bank_patch;
  const std::size_t pixels = set.width * set.width;
  for (std::size_t i : indices) {
    if (i >= set.count) throw ShapeError("image index " + std::to_string(i) + " out of range");
    std::span<const double> img(set.pixels.data() + i * pixels, pixels);
    auto coarse = patchify(img, set.width, input_patch);
    auto fine = patchify(img, set.width, bank_patch);
    b.inputs.insert(b.inputs.end(), coarse.begin(), coarse.end());
    b.bank_tokens.insert(b.bank_tokens.end(), fine.begin(), fine.end());
    b.labels.push_back(set.labels[i]);
  }
  return b;
}

}  // namespace adatape

// SPDX-License-Identifier: Apache-2.0
//
// Parity sequences and small grayscale images, plus conversion into model batches.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "adatape/model.hpp"

namespace adatape {

struct ParitySample {
  std::vector<int> symbols;  // entries in {-1, 0, 1}
  int label = 0;             // 1 when the number of +1 entries is odd
};

int parity_label(std::span<const int> symbols);
std::vector<ParitySample> gen_parity(std::size_t length, std::size_t count, std::uint64_t seed);

// Cache format: one row per sample, symbols then the label, comma separated.
std::string parity_csv(std::span<const ParitySample> samples);
std::vector<ParitySample> parse_parity_csv(const std::string& text);

// Raw IDX file: type code 0x08 (unsigned byte) only.
struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> values;
};

constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
constexpr std::uint32_t kIdxImageMagic = 0x00000803;

IdxFile parse_idx(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_idx(const IdxFile& file);

struct ImageSet {
  std::size_t count = 0;
  std::size_t width = 0;  // images are width x width
  std::vector<double> pixels;  // count * width * width, scaled to [0, 1]
  std::vector<int> labels;
};

IdxFile load_idx(const std::filesystem::path& path);
// Reads an image file (rank 3, square) and a label file of matching count.
ImageSet load_image_set(const std::filesystem::path& images, const std::filesystem::path& labels);
void write_image_set(const ImageSet& set, const std::filesystem::path& images, const std::filesystem::path& labels);

// Non-overlapping raster tiling: (W/patch)^2 rows of patch^2 values.
std::vector<double> patchify(std::span<const double> image, std::size_t width, std::size_t patch);
std::vector<double> unpatchify(std::span<const double> patches, std::size_t width, std::size_t patch);

// Noisy class-dependent shapes. Pixel values are quantized to 1/255 so they
// survive an IDX round trip.
ImageSet synthetic_images(std::size_t count, std::size_t width, std::size_t classes, std::uint64_t seed);

// One-hot over {-1, 0, 1}.
constexpr std::size_t kParitySymbolDim = 3;

// AdaTape layout: the sequence is CLS alone and the symbols form the bank.
Batch parity_bank_batch(std::span<const ParitySample> samples);
// Baseline layout: one input token per symbol, no bank.
Batch parity_token_batch(std::span<const ParitySample> samples);
Batch image_batch(const ImageSet& set, std::span<const std::size_t> indices, std::size_t input_patch,
                  std::size_t bank_patch);

}  // namespace adatape

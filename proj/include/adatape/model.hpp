// SPDX-License-Identifier: Apache-2.0
//
// AdaTape encoder: tokens -> optional pre-layers -> adaptive tape reading ->
// transformer layers with separate feed-forward blocks for input and tape rows
// -> classification head on the CLS position. The same class also builds the
// vanilla encoder and a shared-layer ACT-over-depth baseline.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adatape/bank.hpp"
#include "adatape/halting.hpp"
#include "adatape/params.hpp"

namespace adatape {

enum class Variant { kAdaTape, kVanilla, kActDepth };
enum class QuerySource { kCls, kMeanPool };

struct ModelConfig {
  std::size_t depth = 2;
  std::size_t hidden_dim = 64;
  std::size_t mlp_dim = 128;
  std::size_t num_heads = 2;
  std::size_t key_dim = 16;
  std::size_t injection_layer = 0;
  QuerySource query_source = QuerySource::kCls;
  std::size_t num_classes = 2;
  Variant variant = Variant::kAdaTape;

  // Raw input tokens per sample (0 means the sequence is the CLS token alone)
  // and their feature width.
  std::size_t input_len = 0;
  std::size_t input_dim = 3;

  BankKind bank_kind = BankKind::kInputDriven;
  // Input-driven: feature width of fine tokens and rows of the positional table.
  // Learnable: bank_len is the bank size.
  std::size_t bank_dim = 3;
  std::size_t bank_len = 20;

  double ln_eps = 1e-6;
  double act_eps = 0.01;
  // Tape rows reuse ffn_input instead of a separate ffn_tape (single-FFN ablation).
  bool share_tape_ffn = false;

  void validate() const;
};

// Raw features for one batch. Values are row-major per sample.
struct Batch {
  std::size_t size = 0;
  std::size_t input_len = 0;
  std::size_t input_dim = 0;
  std::vector<double> inputs;  // size x input_len x input_dim
  std::size_t bank_len = 0;
  std::size_t bank_dim = 0;
  std::vector<double> bank_tokens;  // size x bank_len x bank_dim
  std::vector<int> labels;
};

template <typename T>
struct Linear {
  Tensor<T> weight, bias;
  static Linear create(ParamStore<T>& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

template <typename T>
struct Norm {
  Tensor<T> gamma, beta;
  T eps = T(1e-6);
  static Norm create(ParamStore<T>& params, const std::string& name, std::size_t dim, double eps);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

// down(gelu(up(norm(x))))
template <typename T>
struct FeedForward {
  Norm<T> norm;
  Linear<T> up, down;
  static FeedForward create(ParamStore<T>& params, const std::string& name, std::size_t hidden, std::size_t mlp,
                            double eps, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

// out(MHA(norm(x))) over [B, L, H] with a per-sample key mask.
template <typename T>
struct Attention {
  Norm<T> norm;
  Linear<T> qkv, out;
  std::size_t heads = 1;
  static Attention create(ParamStore<T>& params, const std::string& name, std::size_t hidden, std::size_t heads,
                          double eps, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x, std::span<const std::uint8_t> key_valid) const;
};

template <typename T>
struct EncoderLayer {
  Attention<T> attention;
  FeedForward<T> ffn_input;
  std::optional<FeedForward<T>> ffn_tape;
};

// Pre-norm block with shared attention over all rows, then ffn_input on rows
// [0, boundary) and ffn_tape on rows [boundary, L). Without ffn_tape every row
// uses ffn_input. key_valid has B * L entries (empty means all valid).
template <typename T>
Tensor<T> dual_ffn_layer(const EncoderLayer<T>& layer, const Tensor<T>& x, std::size_t boundary,
                         std::span<const std::uint8_t> key_valid = {});

// [L, H] tokens -> [1, H] query (row 0 or column mean).
template <typename T>
Tensor<T> query_from_input(const Tensor<T>& tokens, QuerySource source);

struct EncodeOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with query noise or bank masking
};

template <typename T>
struct EncodeOutput {
  Tensor<T> logits;       // [B, num_classes]
  Tensor<T> ponder_loss;  // mean per-sample l_atr (or l_act), scalar
  std::vector<AtrTrace> traces;
  std::vector<std::size_t> seq_lengths;  // input + tape tokens per sample
  std::vector<double> ponder_per_sample;
};

template <typename T>
class AdaTapeModel {
 public:
  AdaTapeModel(ModelConfig config, AtrConfig halting, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const AtrConfig& halting() const { return halting_; }
  AtrConfig& mutable_halting() { return halting_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const std::vector<EncoderLayer<T>>& layers() const { return layers_; }

  EncodeOutput<T> encode(const Batch& batch, const EncodeOptions& options = {}) const;

  // Embedded sequence [B, 1 + input_len, H] before any encoder layer.
  Tensor<T> embed(const Batch& batch) const;

 private:
  EncodeOutput<T> encode_act_depth(const Batch& batch, Tensor<T> x) const;
  Tensor<T> bank_tokens(const Batch& batch) const;
  Tensor<T> head(const Tensor<T>& cls_rows) const;

  ModelConfig config_;
  AtrConfig halting_;
  ParamStore<T> params_;

  Tensor<T> cls_;
  std::optional<Linear<T>> input_embed_;
  Tensor<T> positions_;
  std::vector<EncoderLayer<T>> layers_;
  std::optional<Linear<T>> halt_;
  std::optional<BankProjection<T>> bank_projection_;
  Tensor<T> learnable_bank_;
  std::optional<SharedNorm<T>> bank_norm_;
  Norm<T> head_norm_;
  Linear<T> head_;
};

}  // namespace adatape

// SPDX-License-Identifier: Apache-2.0
#include "adatape/model.hpp"

#include <algorithm>
#include <cmath>

#include "adatape/ops.hpp"

namespace adatape {
namespace {

template <typename T>
std::vector<T> cast_values(std::span<const double> values) {
  return {values.begin(), values.end()};
}

// Re-raises a halting failure with the sample index prepended, keeping its type.
[[noreturn]] void rethrow_for_sample(std::size_t sample) {
  const std::string where = "sample " + std::to_string(sample) + ": ";
  try {
    throw;
  } catch (const BankExhaustedError& e) {
    throw BankExhaustedError(where + e.what());
  } catch (const NumericError& e) {
    throw NumericError(where + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(where + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(where + e.what());
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (depth == 0) throw ConfigError("model depth must be at least 1");
  if (hidden_dim == 0 || num_heads == 0 || hidden_dim % num_heads != 0) {
    throw ConfigError("hidden_dim must be a positive multiple of num_heads");
  }
  if (mlp_dim == 0) throw ConfigError("mlp_dim must be positive");
  if (injection_layer >= depth) throw ConfigError("injection_layer must be < depth");
  if (key_dim == 0 || key_dim > hidden_dim) throw ConfigError("key_dim must be in [1, hidden_dim]");
  if (num_classes == 0) throw ConfigError("num_classes must be positive");
  if (input_len > 0 && input_dim == 0) throw ConfigError("input_dim must be positive");
  if (variant == Variant::kAdaTape) {
    if (bank_len == 0) throw ConfigError("bank_len must be positive");
    if (bank_kind == BankKind::kInputDriven && bank_dim == 0) throw ConfigError("bank_dim must be positive");
  }
  if (!(act_eps > 0.0 && act_eps < 1.0)) throw ConfigError("act_eps must be in (0, 1)");
  if (ln_eps < 0.0) throw ConfigError("ln_eps must be non-negative");
}

template <typename T>
Linear<T> Linear<T>::create(ParamStore<T>& params, const std::string& name, std::size_t in, std::size_t out,
                            Rng& rng) {
  Linear lin;
  lin.weight = params.add(name + ".w", xavier_uniform<T>(in, out, rng));
  lin.bias = params.add(name + ".b", Tensor<T>::zeros(Shape{out}));
  return lin;
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  return add_bias(matmul(x, weight), bias);
}

template <typename T>
Norm<T> Norm<T>::create(ParamStore<T>& params, const std::string& name, std::size_t dim, double eps) {
  Norm n;
  n.gamma = params.add(name + ".gamma", Tensor<T>::full(Shape{dim}, T{1}));
  n.beta = params.add(name + ".beta", Tensor<T>::zeros(Shape{dim}));
  n.eps = static_cast<T>(eps);
  return n;
}

template <typename T>
Tensor<T> Norm<T>::operator()(const Tensor<T>& x) const {
  return layer_norm(x, gamma, beta, eps);
}

template <typename T>
FeedForward<T> FeedForward<T>::create(ParamStore<T>& params, const std::string& name, std::size_t hidden,
                                      std::size_t mlp, double eps, Rng& rng) {
  FeedForward f;
  f.norm = Norm<T>::create(params, name + ".norm", hidden, eps);
  f.up = Linear<T>::create(params, name + ".up", hidden, mlp, rng);
  f.down = Linear<T>::create(params, name + ".down", mlp, hidden, rng);
  return f;
}

template <typename T>
Tensor<T> FeedForward<T>::operator()(const Tensor<T>& x) const {
  return down(gelu(up(norm(x))));
}

template <typename T>
Attention<T> Attention<T>::create(ParamStore<T>& params, const std::string& name, std::size_t hidden,
                                  std::size_t heads, double eps, Rng& rng) {
  Attention a;
  a.norm = Norm<T>::create(params, name + ".norm", hidden, eps);
  a.qkv = Linear<T>::create(params, name + ".qkv", hidden, 3 * hidden, rng);
  a.out = Linear<T>::create(params, name + ".out", hidden, hidden, rng);
  a.heads = heads;
  return a;
}

template <typename T>
Tensor<T> Attention<T>::operator()(const Tensor<T>& x, std::span<const std::uint8_t> key_valid) const {
  const std::size_t batch = x.dim(0), len = x.dim(1), hidden = x.dim(2);
  std::vector<std::uint8_t> all_valid;
  if (key_valid.empty()) {
    all_valid.assign(batch * len, 1);
    key_valid = all_valid;
  }
  Tensor<T> qkv_rows = qkv(norm(x));
  Tensor<T> q = split_heads(slice_last(qkv_rows, 0, hidden), heads);
  Tensor<T> k = split_heads(slice_last(qkv_rows, hidden, 2 * hidden), heads);
  Tensor<T> v = split_heads(slice_last(qkv_rows, 2 * hidden, 3 * hidden), heads);
  const T temperature = static_cast<T>(std::sqrt(static_cast<double>(hidden / heads)));
  Tensor<T> probs = masked_softmax(bmm_nt(q, k), key_valid, heads, temperature);
  return out(merge_heads(bmm(probs, v), heads));
}

template <typename T>
Tensor<T> dual_ffn_layer(const EncoderLayer<T>& layer, const Tensor<T>& x, std::size_t boundary,
                         std::span<const std::uint8_t> key_valid) {
  if (x.rank() != 3) throw ShapeError("dual_ffn_layer expects [B, L, H], got " + x.shape().str());
  const std::size_t len = x.dim(1);
  if (boundary > len) {
    throw ShapeError("dual_ffn_layer: boundary " + std::to_string(boundary) + " exceeds sequence length " +
                     std::to_string(len));
  }
  if (!key_valid.empty() && key_valid.size() != x.dim(0) * len) {
    throw ShapeError("dual_ffn_layer: key mask does not match sequence");
  }
  Tensor<T> h = add(x, layer.attention(x, key_valid));
  if (!layer.ffn_tape || boundary == len) return add(h, layer.ffn_input(h));
  if (boundary == 0) return add(h, (*layer.ffn_tape)(h));
  Tensor<T> inputs = slice_seq(h, 0, boundary);
  Tensor<T> tapes = slice_seq(h, boundary, len);
  return concat_seq(add(inputs, layer.ffn_input(inputs)), add(tapes, (*layer.ffn_tape)(tapes)));
}

template <typename T>
Tensor<T> query_from_input(const Tensor<T>& tokens, QuerySource source) {
  if (tokens.rank() != 2) throw ShapeError("query_from_input expects [L, H] tokens");
  if (tokens.dim(0) == 0) throw ShapeError("query_from_input: empty token sequence");
  return source == QuerySource::kCls ? slice_rows(tokens, 0, 1) : mean_rows(tokens);
}

template <typename T>
AdaTapeModel<T>::AdaTapeModel(ModelConfig config, AtrConfig halting, std::uint64_t seed)
    : config_(config), halting_(halting) {
  config_.validate();
  if (config_.variant == Variant::kAdaTape) halting_.validate();
  Rng rng(seed);
  const std::size_t hidden = config_.hidden_dim;
  const double eps = config_.ln_eps;

  cls_ = params_.add("embed.cls", truncated_normal<T>(Shape{1, hidden}, 0.02, rng));
  if (config_.input_len > 0) {
    input_embed_ = Linear<T>::create(params_, "embed.input", config_.input_dim, hidden, rng);
  }
  positions_ = params_.add("embed.pos", truncated_normal<T>(Shape{1 + config_.input_len, hidden}, 0.02, rng));

  const std::size_t stored_layers = config_.variant == Variant::kActDepth ? 1 : config_.depth;
  for (std::size_t l = 0; l < stored_layers; ++l) {
    const std::string name = config_.variant == Variant::kActDepth ? "shared" : "layer" + std::to_string(l);
    EncoderLayer<T> layer;
    layer.attention = Attention<T>::create(params_, name + ".attn", hidden, config_.num_heads, eps, rng);
    layer.ffn_input = FeedForward<T>::create(params_, name + ".ffn_input", hidden, config_.mlp_dim, eps, rng);
    if (config_.variant == Variant::kAdaTape && !config_.share_tape_ffn && l >= config_.injection_layer) {
      layer.ffn_tape = FeedForward<T>::create(params_, name + ".ffn_tape", hidden, config_.mlp_dim, eps, rng);
    }
    layers_.push_back(std::move(layer));
  }
  if (config_.variant == Variant::kActDepth) halt_ = Linear<T>::create(params_, "halt", hidden, 1, rng);

  if (config_.variant == Variant::kAdaTape) {
    if (config_.bank_kind == BankKind::kInputDriven) {
      bank_projection_ =
          BankProjection<T>::create(params_, "bank", config_.bank_dim, hidden, config_.bank_len, rng);
    } else {
      learnable_bank_ = build_learnable_bank(params_, "bank.tokens", config_.bank_len, hidden, config_.key_dim,
                                             seed + 0x9E3779B97F4A7C15ULL)
                            .tokens;
    }
    bank_norm_ = SharedNorm<T>::create(params_, "bank.norm", hidden, static_cast<T>(eps));
  }

  head_norm_ = Norm<T>::create(params_, "head.norm", hidden, eps);
  head_.weight = params_.add("head.w", truncated_normal<T>(Shape{hidden, config_.num_classes}, 0.02, rng));
  head_.bias = params_.add("head.b", Tensor<T>::zeros(Shape{config_.num_classes}));
}

template <typename T>
Tensor<T> AdaTapeModel<T>::embed(const Batch& batch) const {
  if (batch.size == 0) throw ShapeError("empty batch");
  if (batch.labels.size() != batch.size) throw ShapeError("batch labels do not match batch size");
  Tensor<T> x = broadcast_batch(cls_, batch.size);
  if (config_.input_len > 0) {
    if (batch.input_len != config_.input_len || batch.input_dim != config_.input_dim ||
        batch.inputs.size() != batch.size * batch.input_len * batch.input_dim) {
      throw ShapeError("batch inputs [" + std::to_string(batch.input_len) + " x " +
                       std::to_string(batch.input_dim) + "] do not match model [" +
                       std::to_string(config_.input_len) + " x " + std::to_string(config_.input_dim) + "]");
    }
    Tensor<T> raw = Tensor<T>::from_vector(Shape{batch.size, batch.input_len, batch.input_dim},
                                           cast_values<T>(batch.inputs));
    x = concat_seq(x, (*input_embed_)(raw));
  }
  return add_broadcast_batch(x, positions_);
}

template <typename T>
Tensor<T> AdaTapeModel<T>::bank_tokens(const Batch& batch) const {
  const auto& norm = *bank_norm_;
  if (config_.bank_kind == BankKind::kLearnable) {
    return layer_norm(learnable_bank_, norm.gamma, norm.beta, norm.eps);
  }
  if (batch.bank_dim != config_.bank_dim || batch.bank_len == 0 ||
      batch.bank_tokens.size() != batch.size * batch.bank_len * batch.bank_dim) {
    throw ShapeError("batch bank tokens do not match model bank_dim " + std::to_string(config_.bank_dim));
  }
  Tensor<T> raw = Tensor<T>::from_vector(Shape{batch.size, batch.bank_len, batch.bank_dim},
                                         cast_values<T>(batch.bank_tokens));
  return layer_norm(project_bank_tokens(raw, *bank_projection_), norm.gamma, norm.beta, norm.eps);
}

template <typename T>
Tensor<T> AdaTapeModel<T>::head(const Tensor<T>& cls_rows) const {
  return head_(head_norm_(cls_rows));
}

template <typename T>
EncodeOutput<T> AdaTapeModel<T>::encode(const Batch& batch, const EncodeOptions& options) const {
  Tensor<T> x = embed(batch);
  if (config_.variant == Variant::kActDepth) return encode_act_depth(batch, x);

  const std::size_t n = batch.size;
  const std::size_t input_rows = x.dim(1);
  const std::size_t hidden = config_.hidden_dim;
  const std::size_t pre_layers = config_.variant == Variant::kAdaTape ? config_.injection_layer : config_.depth;
  for (std::size_t l = 0; l < pre_layers; ++l) x = dual_ffn_layer(layers_[l], x, input_rows);

  EncodeOutput<T> out;
  if (config_.variant == Variant::kVanilla) {
    out.logits = head(pick_seq(x, 0));
    out.ponder_loss = Tensor<T>::scalar(T{0});
    out.seq_lengths.assign(n, input_rows);
    out.ponder_per_sample.assign(n, 0.0);
    return out;
  }

  const bool tricks = options.training && (halting_.query_noise_std > 0.0 || halting_.bank_mask_prob > 0.0);
  if (tricks && options.rng == nullptr) throw ConfigError("training tricks need a random generator");

  Tensor<T> queries = config_.query_source == QuerySource::kCls ? pick_seq(x, 0) : mean_seq(x);
  queries = layer_norm(queries, bank_norm_->gamma, bank_norm_->beta, bank_norm_->eps);
  Tensor<T> banks = bank_tokens(batch);
  const std::size_t bank_rows = banks.rank() == 3 ? banks.dim(1) : banks.dim(0);
  halting_.validate_for_bank(bank_rows);

  std::vector<Tensor<T>> tapes;
  std::vector<Tensor<T>> losses;
  for (std::size_t i = 0; i < n; ++i) {
    try {
      TapeBank<T> bank{banks.rank() == 3 ? select_batch(banks, i) : banks, config_.bank_kind, config_.key_dim};
      Tensor<T> query = slice_rows(queries, i, i + 1);
      std::vector<std::uint8_t> mask(bank.size(), 0);
      if (tricks) std::tie(query, mask) = apply_training_tricks(query, std::move(mask), *options.rng, halting_, true);
      AtrResult<T> read = atr_read(query, bank, halting_, mask);
      tapes.push_back(read.tape);
      losses.push_back(read.ponder_loss);
      out.ponder_per_sample.push_back(read.trace.ponder_loss);
      out.traces.push_back(std::move(read.trace));
    } catch (const Error&) {
      rethrow_for_sample(i);
    }
  }

  std::size_t longest = 0;
  for (const auto& t : tapes) longest = std::max(longest, t.dim(0));
  const std::size_t len = input_rows + longest;
  std::vector<std::uint8_t> key_valid(n * len, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t valid = input_rows + tapes[i].dim(0);
    std::fill_n(key_valid.begin() + static_cast<std::ptrdiff_t>(i * len), valid, std::uint8_t{1});
    out.seq_lengths.push_back(valid);
  }
  x = concat_seq(x, stack_padded(tapes, longest, hidden));
  for (std::size_t l = config_.injection_layer; l < config_.depth; ++l) {
    x = dual_ffn_layer(layers_[l], x, input_rows, key_valid);
  }

  Tensor<T> total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  out.ponder_loss = scale(total, T{1} / static_cast<T>(n));
  out.logits = head(pick_seq(x, 0));
  return out;
}

template <typename T>
EncodeOutput<T> AdaTapeModel<T>::encode_act_depth(const Batch& batch, Tensor<T> x) const {
  const std::size_t len = x.dim(1), hidden = x.dim(2);
  const EncoderLayer<T>& shared = layers_.front();
  StateMap<T> halting_logits = [this](const Tensor<T>& s) { return (*halt_)(s); };
  StateMap<T> update = [&shared, len](const Tensor<T>& s) { return dual_ffn_layer(shared, s, len); };

  EncodeOutput<T> out;
  std::vector<Tensor<T>> cls_rows;
  Tensor<T> total;
  for (std::size_t i = 0; i < batch.size; ++i) {
    try {
      Tensor<T> state = reshape(select_batch(x, i), Shape{1, len, hidden});
      ActResult<T> act = act_halt(state, halting_logits, update, config_.depth, config_.act_eps);
      cls_rows.push_back(pick_seq(act.output, 0));
      total = total.defined() ? add(total, act.ponder_loss) : act.ponder_loss;
      out.ponder_per_sample.push_back(static_cast<double>(act.ponder_loss.item()));
    } catch (const Error&) {
      rethrow_for_sample(i);
    }
  }
  out.logits = head(concat_rows(cls_rows));
  out.ponder_loss = scale(total, T{1} / static_cast<T>(batch.size));
  out.seq_lengths.assign(batch.size, len);
  return out;
}

#define ADATAPE_INSTANTIATE_MODEL(T)                                                                 \
  template struct Linear<T>;                                                                         \
  template struct Norm<T>;                                                                           \
  template struct FeedForward<T>;                                                                    \
  template struct Attention<T>;                                                                      \
  template Tensor<T> dual_ffn_layer(const EncoderLayer<T>&, const Tensor<T>&, std::size_t,           \
                                    std::span<const std::uint8_t>);                                  \
  template Tensor<T> query_from_input(const Tensor<T>&, QuerySource);                                \
  template class AdaTapeModel<T>;

ADATAPE_INSTANTIATE_MODEL(float)
ADATAPE_INSTANTIATE_MODEL(double)

}  // namespace adatape

// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "adatape/errors.hpp"
#include "adatape/harness.hpp"
#include "adatape/model.hpp"
#include "adatape/ops.hpp"

using namespace adatape;

namespace {

RunConfig parity_run(std::size_t n, Variant v) {
  RunConfig c = default_run_config(TaskKind::kParity);
  c.parity.length = n;
  c.model.variant = v;
  resolve_run_config(c);
  return c;
}

template <typename T>
void copy_into(const Tensor<T>& src, Tensor<T> dst) {
  std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}

template <typename T>
void copy_ffn(const FeedForward<T>& src, const FeedForward<T>& dst) {
  copy_into(src.norm.gamma, dst.norm.gamma);
  copy_into(src.norm.beta, dst.norm.beta);
  copy_into(src.up.weight, dst.up.weight);
  copy_into(src.up.bias, dst.up.bias);
  copy_into(src.down.weight, dst.down.weight);
  copy_into(src.down.bias, dst.down.bias);
}

Tensor<double> random_tensor(Shape shape, Rng& rng) {
  std::normal_distribution<double> n;
  std::vector<double> v(shape.numel());
  for (double& x : v) x = n(rng);
  return Tensor<double>::from_vector(shape, v);
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("config validation") {
    ModelConfig m;
    CHECK_NOTHROW(m.validate());
    m.num_heads = 3;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m = ModelConfig{};
    m.injection_layer = 2;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m = ModelConfig{};
    m.key_dim = 65;
    CHECK_THROWS_AS(m.validate(), ConfigError);
  }

  TEST_CASE("query_from_input") {
    auto one = Tensor<double>::from_vector(Shape{1, 3}, {1, 2, 3});
    for (auto src : {QuerySource::kCls, QuerySource::kMeanPool}) {
      auto q = query_from_input(one, src);
      for (std::size_t i = 0; i < 3; ++i) CHECK(q.data()[i] == one.data()[i]);
    }
    auto sym = Tensor<double>::from_vector(Shape{2, 3}, {1, -2, 3, -1, 2, -3});
    auto pooled = query_from_input(sym, QuerySource::kMeanPool);
    for (double v : pooled.data()) CHECK(v == 0.0);
    Rng rng(1);
    auto five = random_tensor(Shape{5, 4}, rng);
    auto q = query_from_input(five, QuerySource::kCls);
    for (std::size_t i = 0; i < 4; ++i) CHECK(q.data()[i] == five.data()[i]);
    CHECK_THROWS_AS(query_from_input(Tensor<double>::zeros(Shape{0, 4}), QuerySource::kCls), ShapeError);
  }

  TEST_CASE("dual_ffn_layer boundaries") {
    ParamStore<double> params;
    Rng rng(2);
    EncoderLayer<double> layer;
    layer.attention = Attention<double>::create(params, "attn", 8, 2, 1e-6, rng);
    layer.ffn_input = FeedForward<double>::create(params, "in", 8, 16, 1e-6, rng);
    layer.ffn_tape = FeedForward<double>::create(params, "tape", 8, 16, 1e-6, rng);
    auto x = random_tensor(Shape{2, 5, 8}, rng);

    SUBCASE("boundary = rows leaves ffn_tape without gradient") {
      sum(dual_ffn_layer(layer, x, 5)).backward();
      for (const auto& e : params.entries()) {
        if (e.name.rfind("tape", 0) == 0) {
          for (double g : e.value.grad()) CHECK(g == 0.0);
        } else if (e.name == "in.up.w") {
          CHECK(e.value.has_grad());
        }
      }
    }
    SUBCASE("boundary = 0 leaves ffn_input without gradient") {
      sum(dual_ffn_layer(layer, x, 0)).backward();
      for (const auto& e : params.entries()) {
        if (e.name.rfind("in.", 0) == 0) {
          for (double g : e.value.grad()) CHECK(g == 0.0);
        }
      }
    }
    SUBCASE("boundary past the end is an error") { CHECK_THROWS_AS(dual_ffn_layer(layer, x, 6), ShapeError); }
    SUBCASE("tied parameters reproduce the single-FFN layer") {
      copy_ffn(layer.ffn_input, *layer.ffn_tape);
      EncoderLayer<double> single{layer.attention, layer.ffn_input, std::nullopt};
      for (std::size_t boundary : {0, 2, 5}) {
        auto dual = dual_ffn_layer(layer, x, boundary);
        auto plain = dual_ffn_layer(single, x, boundary);
        for (std::size_t i = 0; i < dual.numel(); ++i) CHECK(std::abs(dual.data()[i] - plain.data()[i]) <= 1e-12);
      }
    }
    SUBCASE("grad check through the layer with a key mask") {
      const std::vector<std::uint8_t> valid = {1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
      std::vector<double> w(2 * 5 * 8);
      std::normal_distribution<double> n;
      for (double& v : w) v = n(rng);
      LossFn loss = [&](ParamStore<double>&) { return sum(mul_const<double>(dual_ffn_layer(layer, x, 2, valid), w)); };
      GradCheckOptions opt;
      opt.samples = 60;
      CHECK(grad_check(loss, params, opt).passed);
    }
  }

  TEST_CASE("tied FFNs match the shared-FFN model end to end") {
    RunConfig c = parity_run(12, Variant::kAdaTape);
    c.model.depth = 3;
    AdaTapeModel<double> dual(c.model, c.halting, 5);
    ModelConfig shared_cfg = c.model;
    shared_cfg.share_tape_ffn = true;
    AdaTapeModel<double> shared(shared_cfg, c.halting, 99);
    for (const auto& e : shared.params().entries()) copy_into(dual.params().get(e.name), e.value);
    for (const auto& layer : dual.layers()) copy_ffn(layer.ffn_input, *layer.ffn_tape);

    auto samples = gen_parity(12, 16, 3);
    Batch b = parity_bank_batch(samples);
    auto a = dual.encode(b);
    auto s = shared.encode(b);
    for (std::size_t i = 0; i < a.logits.numel(); ++i) CHECK(std::abs(a.logits.data()[i] - s.logits.data()[i]) <= 1e-5);
  }

  TEST_CASE("padding does not change a sample's logits") {
    RunConfig c = parity_run(20, Variant::kAdaTape);
    AdaTapeModel<float> model(c.model, c.halting, 4);
    auto samples = gen_parity(20, 64, 8);
    NoGradGuard no_grad;
    auto all = model.encode(parity_bank_batch(samples));
    std::size_t shortest = 0, longest = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (all.seq_lengths[i] < all.seq_lengths[shortest]) shortest = i;
      if (all.seq_lengths[i] > all.seq_lengths[longest]) longest = i;
    }
    REQUIRE(all.seq_lengths[shortest] < all.seq_lengths[longest]);
    std::vector<ParitySample> pair = {samples[shortest], samples[longest]};
    auto padded = model.encode(parity_bank_batch(pair));
    std::vector<ParitySample> alone = {samples[shortest]};
    auto single = model.encode(parity_bank_batch(alone));
    CHECK(padded.seq_lengths[0] < padded.seq_lengths[1]);
    for (std::size_t k = 0; k < 2; ++k) CHECK(std::abs(padded.logits.data()[k] - single.logits.data()[k]) <= 1e-5f);
  }

  TEST_CASE("tape lengths and traces") {
    RunConfig c = parity_run(20, Variant::kAdaTape);
    AdaTapeModel<float> model(c.model, c.halting, 1);
    auto samples = gen_parity(20, 32, 2);
    NoGradGuard no_grad;
    auto out = model.encode(parity_bank_batch(samples));
    REQUIRE(out.traces.size() == 32);
    for (std::size_t i = 0; i < 32; ++i) {
      const auto n = out.traces[i].tape_length();
      CHECK(n >= 1);
      CHECK(n <= c.halting.max_ponder);
      CHECK(out.seq_lengths[i] == 1 + n);
      for (const auto& it : out.traces[i].iterations) CHECK(it.indices.size() == 2);
    }
    CHECK(out.logits.dim(0) == 32);
    CHECK(out.logits.dim(1) == 2);
  }

  TEST_CASE("vanilla variant has no tape") {
    RunConfig c = parity_run(10, Variant::kVanilla);
    AdaTapeModel<float> model(c.model, c.halting, 1);
    CHECK_FALSE(model.params().contains("bank.norm.gamma"));
    CHECK_FALSE(model.params().contains("layer0.ffn_tape.up.w"));
    auto samples = gen_parity(10, 4, 2);
    auto out = model.encode(parity_token_batch(samples));
    CHECK(out.traces.empty());
    for (auto l : out.seq_lengths) CHECK(l == 11);
    CHECK(out.ponder_loss.item() == 0.0f);
  }

  TEST_CASE("act-depth baseline with T = 1 applies one layer") {
    RunConfig c = parity_run(6, Variant::kActDepth);
    c.model.depth = 1;
    AdaTapeModel<double> model(c.model, c.halting, 3);
    CHECK(model.params().contains("shared.attn.qkv.w"));
    CHECK(model.params().contains("halt.w"));
    auto samples = gen_parity(6, 5, 1);
    auto out = model.encode(parity_token_batch(samples));
    for (double p : out.ponder_per_sample) CHECK(p == 1.0);
  }

  TEST_CASE("act-depth baseline grad check") {
    RunConfig c = parity_run(6, Variant::kActDepth);
    c.model.depth = 4;
    c.model.hidden_dim = 16;
    c.model.mlp_dim = 16;
    c.model.key_dim = 4;
    AdaTapeModel<double> model(c.model, c.halting, 3);
    auto samples = gen_parity(6, 3, 1);
    Batch b = parity_token_batch(samples);
    LossFn loss = [&](ParamStore<double>&) {
      auto out = model.encode(b);
      return add(cross_entropy(out.logits, b.labels), scale(out.ponder_loss, 0.01));
    };
    GradCheckOptions opt;
    opt.samples = 40;
    CHECK(grad_check(loss, model.params(), opt).passed);
  }

  TEST_CASE("full AdaTape parity loss passes the gradient check") {
    RunConfig c = parity_run(12, Variant::kAdaTape);
    auto report = model_grad_check(c, 20, 4);
    std::size_t probed = 0;
    for (const auto& p : report.params) probed += p.checked;
    CHECK(probed == 20);
    CHECK(report.max_rel_error <= 1e-3);
  }

  TEST_CASE("image model encodes with mean-pool query after one layer") {
    RunConfig c = default_run_config(TaskKind::kImage);
    c.model.depth = 2;
    resolve_run_config(c);
    CHECK(c.model.input_len == 16);
    CHECK(c.model.bank_len == 49);
    AdaTapeModel<float> model(c.model, c.halting, 1);
    CHECK_FALSE(model.params().contains("layer0.ffn_tape.up.w"));
    CHECK(model.params().contains("layer1.ffn_tape.up.w"));
    ImageSet set = synthetic_images(3, 28, 10, 4);
    const std::size_t idx[] = {0, 1, 2};
    NoGradGuard no_grad;
    auto out = model.encode(image_batch(set, idx, 7, 4));
    CHECK(out.logits.dim(1) == 10);
    for (std::size_t i = 0; i < 3; ++i) CHECK(out.seq_lengths[i] == 17 + out.traces[i].tape_length());
  }

  TEST_CASE("halting errors carry the sample index") {
    RunConfig c = parity_run(8, Variant::kAdaTape);
    c.model.bank_kind = BankKind::kLearnable;
    c.model.bank_len = 16;
    c.halting.bank_mask_prob = 0.9;
    c.model.input_len = 8;
    AdaTapeModel<float> model(c.model, c.halting, 1);
    auto samples = gen_parity(8, 8, 1);
    Rng rng(0);
    try {
      model.encode(parity_token_batch(samples), EncodeOptions{true, &rng});
      FAIL("expected the bank to run out");
    } catch (const BankExhaustedError& e) {
      CHECK(std::string(e.what()).rfind("sample ", 0) == 0);
    }
  }
}

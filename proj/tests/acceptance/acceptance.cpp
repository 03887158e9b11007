// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. `--only 2,5` runs a subset.
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "adatape/errors.hpp"
#include "adatape/halting.hpp"
#include "adatape/harness.hpp"
#include "adatape/io.hpp"
#include "adatape/ops.hpp"
#include "oracles.hpp"
#include "primitive_checks.hpp"

using namespace adatape;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Detail {
 public:
  __attribute__((format(printf, 2, 3))) void add(const char* fmt, ...) {
    char buf[256];
    va_list args;
    va_start(args, fmt);
    std::vsnprintf(buf, sizeof buf, fmt, args);
    va_end(args);
    if (!text_.empty()) text_ += "; ";
    text_ += buf;
  }
  const std::string& str() const { return text_; }

 private:
  std::string text_;
};

fs::path g_work;

fs::path workdir(const std::string& name) {
  fs::path p = g_work / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor<double> matrix(const oracle::Mat& m) {
  std::vector<double> flat;
  for (const auto& row : m) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor<double>::from_vector(Shape{m.size(), m.front().size()}, flat);
}

Tensor<double> row(const oracle::Vec& v) { return Tensor<double>::from_vector(Shape{1, v.size()}, v); }

AtrConfig config_for(const oracle::AtrInstance& inst) {
  AtrConfig cfg;
  cfg.tau = inst.tau;
  cfg.max_ponder = inst.T;
  cfg.loss_variant = inst.entropy_loss ? PonderLoss::kEntropy : PonderLoss::kCollect;
  cfg.query_update = inst.average_update ? QueryUpdate::kAverage : QueryUpdate::kReplace;
  return cfg;
}

constexpr std::uint64_t kInstanceSeed = 20240601;
constexpr std::size_t kInstances = 1000;

// --- 1 ------------------------------------------------------------------------

Outcome parity_separation() {
  Outcome o;
  Detail d;
  double acc[2] = {0, 0};
  const Variant variants[] = {Variant::kAdaTape, Variant::kVanilla};
  for (int i = 0; i < 2; ++i) {
    RunConfig c = default_run_config(TaskKind::kParity);
    c.model.variant = variants[i];
    c.output_dir = workdir("parity_" + variant_name(variants[i])).string();
    c.log_wallclock = true;
    resolve_run_config(c);
    if (i == 0) {
      d.add("N=%zu depth=%zu H=%zu heads=%zu K=%zu tau=%g T=%zu steps=%zu", c.parity.length, c.model.depth,
            c.model.hidden_dim, c.model.num_heads, c.halting.tokens_per_step(), c.halting.tau, c.halting.max_ponder,
            c.steps);
    }
    TrainResult r = train(c);
    acc[i] = r.final_eval.accuracy;
    d.add("%s acc=%.4f avg_len=%.3f", variant_name(variants[i]).c_str(), acc[i], r.final_eval.seq.avg);
  }
  o.pass = acc[0] >= 0.90 && acc[1] <= 0.60;
  d.add("need adatape>=0.90, vanilla<=0.60");
  o.detail = d.str();
  return o;
}

// --- 2 ------------------------------------------------------------------------

Outcome oracle_equivalence() {
  std::mt19937_64 rng(kInstanceSeed);
  std::size_t index_mismatch = 0, ties = 0;
  double max_err = 0.0;
  for (std::size_t t = 0; t < kInstances; ++t) {
    auto inst = oracle::random_instance(rng, t);
    TapeBank<double> tb{matrix(inst.bank), BankKind::kLearnable, inst.key_dim};
    auto got = atr_read(row(inst.query), tb, config_for(inst));
    auto want = oracle::atr_read(inst.query, inst.bank, inst.key_dim, inst.tau, inst.T, inst.entropy_loss,
                                 inst.average_update);
    if (t % 4 == 3) ++ties;
    if (got.trace.tape_length() != want.tokens.size()) {
      ++index_mismatch;
      continue;
    }
    const std::size_t H = inst.query.size();
    for (std::size_t i = 0; i < want.tokens.size(); ++i) {
      const auto& it = got.trace.iterations[i];
      if (it.indices != want.indices[i]) ++index_mismatch;
      for (std::size_t c = 0; c < H; ++c) max_err = std::max(max_err, std::abs(got.tape.data()[i * H + c] - want.tokens[i][c]));
      for (std::size_t k = 0; k < it.weights.size(); ++k) max_err = std::max(max_err, std::abs(it.weights[k] - want.weights[i][k]));
      if (i < want.h_p.size()) max_err = std::max(max_err, std::abs(it.halting_score - want.h_p[i]));
    }
    max_err = std::max(max_err, std::abs(got.trace.ponder_loss - want.loss));
  }
  Detail d;
  d.add("%zu instances (%zu with integer ties), index mismatches %zu, max |diff| %.3e", kInstances, ties,
        index_mismatch, max_err);
  return {index_mismatch == 0 && max_err <= 1e-6, d.str()};
}

// --- 3 ------------------------------------------------------------------------

Outcome halting_invariants() {
  std::mt19937_64 rng(kInstanceSeed);
  std::size_t reselect = 0, too_long = 0, not_increasing = 0, outside_hull = 0, bad_entropy = 0;
  for (std::size_t t = 0; t < kInstances; ++t) {
    auto inst = oracle::random_instance(rng, t);
    TapeBank<double> tb{matrix(inst.bank), BankKind::kLearnable, inst.key_dim};
    auto r = atr_read(row(inst.query), tb, config_for(inst));
    const auto& its = r.trace.iterations;
    const std::size_t H = inst.query.size();
    if (its.size() > static_cast<std::size_t>(std::ceil(inst.tau * static_cast<double>(inst.K)))) ++too_long;
    std::set<std::size_t> used;
    double prev = 0.0;
    for (std::size_t i = 0; i < its.size(); ++i) {
      const auto& it = its[i];
      for (auto idx : it.indices) {
        if (!used.insert(idx).second) ++reselect;
      }
      if (i + 1 < its.size()) {
        if (!(it.halting_score > prev)) ++not_increasing;
        prev = it.halting_score;
      }
      // convex combination of the selected rows
      double wsum = 0.0, sq = 0.0;
      bool ok = true;
      for (double w : it.weights) {
        ok = ok && w >= 0.0;
        wsum += w;
        sq += w * w;
      }
      ok = ok && std::abs(wsum - 1.0) <= 1e-9;
      for (std::size_t c = 0; c < H && ok; ++c) {
        double v = 0.0;
        for (std::size_t k = 0; k < it.indices.size(); ++k) v += it.weights[k] * inst.bank[it.indices[k]][c];
        ok = std::abs(v - r.tape.data()[i * H + c]) <= 1e-9;
      }
      if (!ok) ++outside_hull;
      const double ent = 1.0 - sq;
      if (ent < -1e-12 || ent > 1.0 - 1.0 / static_cast<double>(inst.K) + 1e-12) ++bad_entropy;
    }
  }
  Detail d;
  d.add("%zu instances: reselected %zu, over ceil(tau*K) %zu, non-increasing h_p %zu, outside hull %zu, "
        "entropy out of range %zu",
        kInstances, reselect, too_long, not_increasing, outside_hull, bad_entropy);
  return {reselect + too_long + not_increasing + outside_hull + bad_entropy == 0, d.str()};
}

// --- 4 ------------------------------------------------------------------------

StateMap<double> constant_logit(double p) {
  return [p](const Tensor<double>& s) { return Tensor<double>::full(Shape{s.dim(0), 1}, std::log(p / (1.0 - p))); };
}

Outcome act_correctness() {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> bias_u(-4.0, 2.0), val(-1.0, 1.0), gain(0.5, 1.2);
  std::uniform_int_distribution<std::size_t> pick_t(1, 12), pick_n(1, 4), pick_h(1, 5);
  std::size_t bad_sum = 0, bad_r = 0, ref_mismatch = 0;
  double worst_sum = 0.0;
  for (std::size_t t = 0; t < kInstances; ++t) {
    const double bias = bias_u(rng), a = gain(rng);
    const std::size_t T = pick_t(rng), n = pick_n(rng), h = pick_h(rng);
    oracle::Mat m0(n, oracle::Vec(h));
    std::vector<double> flat;
    for (auto& r : m0) {
      for (double& v : r) {
        v = val(rng);
        flat.push_back(v);
      }
    }
    auto s0 = Tensor<double>::from_vector(Shape{n, h}, flat);
    StateMap<double> g = [a](const Tensor<double>& s) { return add_scalar(scale(s, a), 0.1); };
    StateMap<double> logits = [bias](const Tensor<double>& s) { return add_scalar(slice_last(s, 0, 1), bias); };
    auto got = act_halt(s0, logits, g, T, 0.01);

    auto p_of = [bias](const oracle::Mat& s) {
      double acc = 0.0;
      for (const auto& r : s) acc += 1.0 / (1.0 + std::exp(-(r[0] + bias)));
      return acc / static_cast<double>(s.size());
    };
    auto g_ref = [a](const oracle::Mat& s) {
      oracle::Mat out = s;
      for (auto& r : out) {
        for (double& v : r) v = a * v + 0.1;
      }
      return out;
    };
    auto want = oracle::act(m0, p_of, g_ref, T, 0.01);

    double total = 0.0;
    for (double w : got.weights) total += w;
    worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    if (std::abs(total - 1.0) > 1e-6) ++bad_sum;
    if (!(got.remainder > 0.0 && got.remainder <= 1.0)) ++bad_r;
    bool same = got.updates == want.n && std::abs(got.remainder - want.r) <= 1e-9 &&
                std::abs(got.ponder_loss.item() - want.l_act) <= 1e-9;
    for (std::size_t i = 0; i < n * h && same; ++i) same = std::abs(got.output.data()[i] - want.output[i / h][i % h]) <= 1e-9;
    if (!same) ++ref_mismatch;
  }

  // hand traces
  auto s0 = Tensor<double>::from_vector(Shape{2, 2}, {1, 2, 3, 4});
  StateMap<double> twice = [](const Tensor<double>& s) { return scale(s, 2.0); };
  auto first = act_halt(s0, constant_logit(0.995), twice, 5, 0.01);
  bool hand1 = first.updates == 0 && first.remainder == 1.0 && first.ponder_loss.item() == 1.0;
  for (std::size_t i = 0; i < 4; ++i) hand1 = hand1 && first.output.data()[i] == s0.data()[i];
  auto steady = act_halt(s0, constant_logit(0.4), twice, 10, 0.01);
  bool hand2 = steady.updates == 2 && std::abs(steady.remainder - 0.2) <= 1e-12 &&
               std::abs(steady.ponder_loss.item() - 2.2) <= 1e-12;
  for (std::size_t i = 0; i < 4; ++i) hand2 = hand2 && std::abs(steady.output.data()[i] - 3.2 * s0.data()[i]) <= 1e-12;

  Detail d;
  d.add("%zu runs: weight sums off %zu (worst %.1e), r out of (0,1] %zu, reference mismatches %zu", kInstances,
        bad_sum, worst_sum, bad_r, ref_mismatch);
  d.add("p=0.995 trace %s (n=%zu r=%g)", hand1 ? "ok" : "WRONG", first.updates, first.remainder);
  d.add("p=0.4 trace %s (n=%zu r=%g l=%g)", hand2 ? "ok" : "WRONG", steady.updates, steady.remainder,
        steady.ponder_loss.item());
  return {bad_sum + bad_r + ref_mismatch == 0 && hand1 && hand2, d.str()};
}

// --- 5 ------------------------------------------------------------------------

Outcome layernorm_absorption() {
  LnDiagResult r = layernorm_diagnostic(kInstances, 64, 5);
  Detail d;
  d.add("%zu pairs, p in (0,10], dim 64, eps 0: max deviation %.3e", r.pairs, r.max_deviation);
  return {r.pairs == kInstances && r.max_deviation <= 1e-6, d.str()};
}

// --- 6 ------------------------------------------------------------------------

Outcome gradient_checks() {
  double prim = 0.0;
  std::string worst;
  const auto results = primitive_checks::all_primitives();
  for (const auto& [name, err] : results) {
    if (err >= prim) {
      prim = err;
      worst = name;
    }
  }
  RunConfig c = default_run_config(TaskKind::kParity);
  resolve_run_config(c);
  GradCheckReport full = model_grad_check(c, 20, 4);
  std::size_t probed = 0;
  for (const auto& p : full.params) probed += p.checked;
  Detail d;
  d.add("%zu primitives, max rel error %.3e (%s)", results.size(), prim, worst.c_str());
  d.add("full parity loss: %zu probes over %zu tensors, max rel error %.3e", probed, full.params.size(),
        full.max_rel_error);
  return {prim <= 1e-3 && probed >= 20 && full.max_rel_error <= 1e-3, d.str()};
}

// --- 7 ------------------------------------------------------------------------

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

Outcome tying_and_padding() {
  double tie_err = 0.0, pad_err = 0.0;
  std::size_t pad_pairs = 0;
  NoGradGuard no_grad;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RunConfig c = default_run_config(TaskKind::kParity);
    c.model.depth = 3;
    resolve_run_config(c);
    AdaTapeModel<float> dual(c.model, c.halting, seed);
    ModelConfig shared_cfg = c.model;
    shared_cfg.share_tape_ffn = true;
    AdaTapeModel<float> shared(shared_cfg, c.halting, seed + 100);
    for (const auto& e : shared.params().entries()) copy_into(dual.params().get(e.name), e.value);
    for (const auto& layer : dual.layers()) copy_ffn(layer.ffn_input, *layer.ffn_tape);
    auto samples = gen_parity(c.parity.length, 64, seed);
    Batch b = parity_bank_batch(samples);
    auto a = dual.encode(b);
    auto s = shared.encode(b);
    for (std::size_t i = 0; i < a.logits.numel(); ++i) {
      tie_err = std::max(tie_err, static_cast<double>(std::abs(a.logits.data()[i] - s.logits.data()[i])));
    }

    // each sample alone vs inside the padded batch
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::vector<ParitySample> one = {samples[i]};
      auto alone = dual.encode(parity_bank_batch(one));
      if (alone.seq_lengths[0] != a.seq_lengths[i]) return {false, "tape length changed under batching"};
      for (std::size_t k = 0; k < 2; ++k) {
        pad_err = std::max(pad_err, static_cast<double>(std::abs(alone.logits.data()[k] - a.logits.data()[i * 2 + k])));
      }
      if (alone.seq_lengths[0] < *std::max_element(a.seq_lengths.begin(), a.seq_lengths.end())) ++pad_pairs;
    }
  }
  Detail d;
  d.add("tied vs single-FFN max |diff| %.3e", tie_err);
  d.add("padded vs alone max |diff| %.3e over %zu padded samples", pad_err, pad_pairs);
  return {tie_err <= 1e-5 && pad_err <= 1e-5 && pad_pairs > 0, d.str()};
}

// --- 8 ------------------------------------------------------------------------

Outcome adaptivity() {
  RunConfig c = default_run_config(TaskKind::kImage);
  c.image.synthetic_train = 2048;
  c.image.synthetic_eval = 512;
  c.steps = 600;
  c.eval_every = 200;
  c.optimizer.warmup_steps = 50;
  c.output_dir = workdir("image_adaptive").string();
  resolve_run_config(c);
  TrainResult adaptive = train(c);

  RunConfig f = c;
  f.halting.adaptive_length = false;
  f.output_dir = workdir("image_fixed").string();
  TrainResult fixed = train(f);

  Detail d;
  d.add("synthetic %zux%zu images, %zu steps", c.image.width, c.image.width, c.steps);
  d.add("adaptive acc=%.3f avg=%.3f var=%.6f", adaptive.final_eval.accuracy, adaptive.final_eval.seq.avg,
        adaptive.final_eval.seq.var);
  d.add("fixed acc=%.3f avg=%.3f var=%.6f", fixed.final_eval.accuracy, fixed.final_eval.seq.avg,
        fixed.final_eval.seq.var);
  return {adaptive.final_eval.seq.var > 0.0 && fixed.final_eval.seq.var == 0.0, d.str()};
}

// --- 9 ------------------------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + ADATAPE_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

Outcome determinism() {
  fs::path dir = workdir("determinism");
  const std::string cfg = R"({"task": "parity", "parity": {"length": 12, "eval_samples": 256},
    "steps": 40, "batch_size": 32, "eval_every": 10, "seed": 9,
    "halting": {"query_noise_std": 0.01}})";
  write_text_atomic(dir / "config.json", cfg);
  std::size_t compared = 0, differ = 0;
  auto same = [&](const fs::path& a, const fs::path& b) {
    ++compared;
    if (!fs::exists(a) || !fs::exists(b) || read_file(a) != read_file(b)) ++differ;
  };
  for (const char* run : {"a", "b"}) {
    const std::string out = (dir / run).string();
    if (run_cli("train -c \"" + (dir / "config.json").string() + "\" -o \"" + out + "\"") != 0) {
      return {false, "train command failed"};
    }
    if (run_cli("eval \"" + out + "/checkpoint.atkp\" -o \"" + out + "/eval\"") != 0) {
      return {false, "eval command failed"};
    }
  }
  same(dir / "a" / "metrics.csv", dir / "b" / "metrics.csv");
  same(dir / "a" / "checkpoint.atkp", dir / "b" / "checkpoint.atkp");
  same(dir / "a" / "eval" / "eval.csv", dir / "b" / "eval" / "eval.csv");
  same(dir / "a" / "eval" / "traces.csv", dir / "b" / "eval" / "traces.csv");

  ::setenv("ADATAPE_SEED", "10", 1);
  run_cli("train -c \"" + (dir / "config.json").string() + "\" -o \"" + (dir / "c").string() + "\"");
  ::unsetenv("ADATAPE_SEED");
  const bool seed_matters = read_file(dir / "c" / "metrics.csv") != read_file(dir / "a" / "metrics.csv");

  Detail d;
  d.add("train + eval twice via the CLI: %zu files compared, %zu differ", compared, differ);
  d.add("other seed changes metrics: %s", seed_matters ? "yes" : "no");
  return {differ == 0 && seed_matters, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    }
  }
  const char* env = std::getenv("ADATAPE_ACCEPTANCE_DIR");
  g_work = env ? fs::path(env) : fs::temp_directory_path() / "adatape_acceptance";
  fs::create_directories(g_work);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"parity separation", parity_separation},
      {"oracle equivalence", oracle_equivalence},
      {"halting invariants", halting_invariants},
      {"ACT correctness", act_correctness},
      {"layer-norm absorption", layernorm_absorption},
      {"gradient checks", gradient_checks},
      {"dual-FFN tying and padding invariance", tying_and_padding},
      {"adaptive length variance", adaptivity},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}

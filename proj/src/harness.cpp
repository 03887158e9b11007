// SPDX-License-Identifier: Apache-2.0
#include "adatape/harness.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <random>
#include <set>

#include <json.hpp>

#include "adatape/checkpoint.hpp"
#include "adatape/errors.hpp"
#include "adatape/io.hpp"
#include "adatape/ops.hpp"

namespace adatape {

namespace fs = std::filesystem;
using json = nlohmann::json;

// --- names ----------------------------------------------------------------------

namespace {

template <typename E>
struct NamedValue {
  const char* name;
  E value;
};

constexpr NamedValue<Variant> kVariants[] = {
    {"adatape", Variant::kAdaTape}, {"vanilla", Variant::kVanilla}, {"act_depth", Variant::kActDepth}};
constexpr NamedValue<TaskKind> kTasks[] = {{"parity", TaskKind::kParity}, {"image", TaskKind::kImage}};
constexpr NamedValue<QuerySource> kQuerySources[] = {{"cls", QuerySource::kCls},
                                                     {"mean_pool", QuerySource::kMeanPool}};
constexpr NamedValue<BankKind> kBankKinds[] = {{"input_driven", BankKind::kInputDriven},
                                               {"learnable", BankKind::kLearnable}};
constexpr NamedValue<PonderLoss> kLosses[] = {{"entropy", PonderLoss::kEntropy}, {"collect", PonderLoss::kCollect}};
constexpr NamedValue<QueryUpdate> kUpdates[] = {{"average", QueryUpdate::kAverage},
                                                {"replace", QueryUpdate::kReplace}};
constexpr NamedValue<MaskMode> kMasks[] = {{"neg_inf", MaskMode::kNegInf},
                                           {"multiplicative", MaskMode::kMultiplicative}};
constexpr NamedValue<LrSchedule> kSchedules[] = {{"constant", LrSchedule::kConstant},
                                                 {"cosine", LrSchedule::kCosine}};

template <typename E, std::size_t N>
const char* name_of(const NamedValue<E> (&table)[N], E value) {
  for (const auto& nv : table) {
    if (nv.value == value) return nv.name;
  }
  throw ConfigError("unnamed enum value");
}

template <typename E, std::size_t N>
E value_of(const NamedValue<E> (&table)[N], const std::string& name, const std::string& where) {
  std::string options;
  for (const auto& nv : table) {
    if (name == nv.name) return nv.value;
    options += std::string(options.empty() ? "" : ", ") + nv.name;
  }
  throw ConfigError(where + ": unknown value '" + name + "' (expected one of " + options + ")");
}

}  // namespace

std::string variant_name(Variant v) { return name_of(kVariants, v); }
Variant parse_variant(const std::string& name) { return value_of(kVariants, name, "variant"); }

// --- config ---------------------------------------------------------------------

RunConfig default_run_config(TaskKind task) {
  RunConfig c;
  c.task = task;
  if (task == TaskKind::kParity) {
    c.model = ModelConfig{};
    c.halting.tau = 0.0;  // derived from the sequence length
    c.halting.max_ponder = 0;
    c.lambda = 0.01;
  } else {
    c.model.depth = 3;
    c.model.hidden_dim = 64;
    c.model.mlp_dim = 128;
    c.model.num_heads = 2;
    c.model.key_dim = 16;
    c.model.injection_layer = 1;
    c.model.query_source = QuerySource::kMeanPool;
    c.model.num_classes = 10;
    c.halting.tau = 2.0;
    c.halting.max_ponder = 8;
    c.optimizer.lr = 1e-3;
    c.optimizer.warmup_steps = 100;
    c.optimizer.schedule = LrSchedule::kCosine;
    c.optimizer.weight_decay = 1e-4;
    c.steps = 2000;
    c.batch_size = 64;
    c.eval_every = 500;
    c.lambda = 0.01;
  }
  return c;
}

namespace {

// Reads typed fields from one JSON object and rejects leftovers.
class FieldReader {
 public:
  FieldReader(const json& object, std::string where) : object_(object), where_(std::move(where)) {
    if (!object_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  const json* find(const char* key) {
    auto it = object_.find(key);
    if (it == object_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void read(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) {
        throw ConfigError(path(key) + ": expected a non-negative integer");
      }
      out = v->get<std::size_t>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(path(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(path(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(path(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  template <typename E, std::size_t N>
  void read_enum(const char* key, const NamedValue<E> (&table)[N], E& out) {
    std::string name;
    if (find(key)) {
      read(key, name);
      out = value_of(table, name, path(key));
    }
  }
  void read(const char* key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(path(key) + ": expected an array");
      out.clear();
      for (const auto& x : *v) {
        if (!x.is_number_unsigned()) throw ConfigError(path(key) + ": expected non-negative integers");
        out.push_back(x.get<std::size_t>());
      }
    }
  }
  void read(const char* key, std::vector<Variant>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(path(key) + ": expected an array");
      out.clear();
      for (const auto& x : *v) {
        if (!x.is_string()) throw ConfigError(path(key) + ": expected variant names");
        out.push_back(value_of(kVariants, x.get<std::string>(), path(key)));
      }
    }
  }

  std::string path(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : object_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown config key '" + path(key.c_str()) + "'");
    }
  }

 private:
  const json& object_;
  std::string where_;
  std::set<std::string> seen_;
};

void read_model(const json& j, ModelConfig& m) {
  FieldReader r(j, "model");
  r.read("depth", m.depth);
  r.read("hidden_dim", m.hidden_dim);
  r.read("mlp_dim", m.mlp_dim);
  r.read("num_heads", m.num_heads);
  r.read("key_dim", m.key_dim);
  r.read("injection_layer", m.injection_layer);
  r.read_enum("query_source", kQuerySources, m.query_source);
  r.read("num_classes", m.num_classes);
  r.read_enum("variant", kVariants, m.variant);
  r.read_enum("bank", kBankKinds, m.bank_kind);
  if (m.bank_kind == BankKind::kLearnable) r.read("bank_size", m.bank_len);
  else if (r.find("bank_size")) throw ConfigError("model.bank_size applies to learnable banks only");
  r.read("ln_eps", m.ln_eps);
  r.read("act_eps", m.act_eps);
  r.read("share_tape_ffn", m.share_tape_ffn);
  r.finish();
}

void read_halting(const json& j, AtrConfig& h) {
  FieldReader r(j, "halting");
  r.read("tau", h.tau);
  r.read("max_ponder", h.max_ponder);
  r.read_enum("loss", kLosses, h.loss_variant);
  r.read_enum("query_update", kUpdates, h.query_update);
  r.read_enum("mask_mode", kMasks, h.mask_mode);
  r.read("query_noise_std", h.query_noise_std);
  r.read("bank_mask_prob", h.bank_mask_prob);
  r.read("adaptive_length", h.adaptive_length);
  r.finish();
}

void read_optimizer(const json& j, OptimizerConfig& o) {
  FieldReader r(j, "optimizer");
  r.read("lr", o.lr);
  r.read("beta1", o.beta1);
  r.read("beta2", o.beta2);
  r.read("eps", o.eps);
  r.read("weight_decay", o.weight_decay);
  r.read("warmup_steps", o.warmup_steps);
  r.read_enum("schedule", kSchedules, o.schedule);
  r.finish();
}

void read_parity(const json& j, ParityTaskConfig& p) {
  FieldReader r(j, "parity");
  r.read("length", p.length);
  r.read("eval_samples", p.eval_samples);
  r.read("sweep_lengths", p.sweep_lengths);
  r.read("sweep_variants", p.sweep_variants);
  r.finish();
}

void read_image(const json& j, ImageTaskConfig& im) {
  FieldReader r(j, "image");
  r.read("train_images", im.train_images);
  r.read("train_labels", im.train_labels);
  r.read("eval_images", im.eval_images);
  r.read("eval_labels", im.eval_labels);
  r.read("width", im.width);
  r.read("input_patch", im.input_patch);
  r.read("bank_patch", im.bank_patch);
  r.read("synthetic_train", im.synthetic_train);
  r.read("synthetic_eval", im.synthetic_eval);
  r.finish();
}

bool symbols_in_bank(const ModelConfig& m) {
  return m.variant == Variant::kAdaTape && m.bank_kind == BankKind::kInputDriven;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  FieldReader top(doc, "");
  TaskKind task = TaskKind::kParity;
  top.read_enum("task", kTasks, task);
  RunConfig c = default_run_config(task);

  if (const json* m = top.find("model")) read_model(*m, c.model);
  if (c.model.bank_kind == BankKind::kLearnable) {
    // Learnable banks train without the ponder loss and with query noise and
    // random bank masking, unless the document says otherwise.
    c.lambda = 0.0;
    c.halting.query_noise_std = 0.01;
    c.halting.bank_mask_prob = 0.1;
    if (!doc.contains("model") || !doc["model"].contains("bank_size")) c.model.bank_len = 1000;
  }
  if (const json* h = top.find("halting")) read_halting(*h, c.halting);
  if (const json* o = top.find("optimizer")) read_optimizer(*o, c.optimizer);
  if (const json* p = top.find("parity")) read_parity(*p, c.parity);
  if (const json* im = top.find("image")) read_image(*im, c.image);
  top.read("steps", c.steps);
  top.read("batch_size", c.batch_size);
  top.read("eval_every", c.eval_every);
  top.read("eval_batch_size", c.eval_batch_size);
  top.read("lambda", c.lambda);
  std::size_t seed = c.seed;
  top.read("seed", seed);
  c.seed = seed;
  top.read("output_dir", c.output_dir);
  top.read("log_wallclock", c.log_wallclock);
  top.finish();
  resolve_run_config(c);
  return c;
}

RunConfig load_run_config(const fs::path& path) { return parse_run_config(read_text(path)); }

std::string run_config_json(const RunConfig& c) {
  json model = {{"depth", c.model.depth},
                {"hidden_dim", c.model.hidden_dim},
                {"mlp_dim", c.model.mlp_dim},
                {"num_heads", c.model.num_heads},
                {"key_dim", c.model.key_dim},
                {"injection_layer", c.model.injection_layer},
                {"query_source", name_of(kQuerySources, c.model.query_source)},
                {"num_classes", c.model.num_classes},
                {"variant", name_of(kVariants, c.model.variant)},
                {"bank", name_of(kBankKinds, c.model.bank_kind)},
                {"ln_eps", c.model.ln_eps},
                {"act_eps", c.model.act_eps},
                {"share_tape_ffn", c.model.share_tape_ffn}};
  if (c.model.bank_kind == BankKind::kLearnable) model["bank_size"] = c.model.bank_len;
  json halting = {{"tau", c.halting.tau},
                  {"max_ponder", c.halting.max_ponder},
                  {"loss", name_of(kLosses, c.halting.loss_variant)},
                  {"query_update", name_of(kUpdates, c.halting.query_update)},
                  {"mask_mode", name_of(kMasks, c.halting.mask_mode)},
                  {"query_noise_std", c.halting.query_noise_std},
                  {"bank_mask_prob", c.halting.bank_mask_prob},
                  {"adaptive_length", c.halting.adaptive_length}};
  json optimizer = {{"lr", c.optimizer.lr},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"warmup_steps", c.optimizer.warmup_steps},
                    {"schedule", name_of(kSchedules, c.optimizer.schedule)}};
  json variants = json::array();
  for (Variant v : c.parity.sweep_variants) variants.push_back(name_of(kVariants, v));
  json parity = {{"length", c.parity.length},
                 {"eval_samples", c.parity.eval_samples},
                 {"sweep_lengths", c.parity.sweep_lengths},
                 {"sweep_variants", variants}};
  json image = {{"train_images", c.image.train_images},
                {"train_labels", c.image.train_labels},
                {"eval_images", c.image.eval_images},
                {"eval_labels", c.image.eval_labels},
                {"width", c.image.width},
                {"input_patch", c.image.input_patch},
                {"bank_patch", c.image.bank_patch},
                {"synthetic_train", c.image.synthetic_train},
                {"synthetic_eval", c.image.synthetic_eval}};
  json doc = {{"task", name_of(kTasks, c.task)},
              {"model", model},
              {"halting", halting},
              {"optimizer", optimizer},
              {"parity", parity},
              {"image", image},
              {"steps", c.steps},
              {"batch_size", c.batch_size},
              {"eval_every", c.eval_every},
              {"eval_batch_size", c.eval_batch_size},
              {"lambda", c.lambda},
              {"seed", c.seed},
              {"output_dir", c.output_dir},
              {"log_wallclock", c.log_wallclock}};
  return doc.dump(2) + "\n";
}

void resolve_run_config(RunConfig& c) {
  ModelConfig& m = c.model;
  if (c.task == TaskKind::kParity) {
    const std::size_t n = c.parity.length;
    if (n == 0) throw ConfigError("parity.length must be at least 1");
    if (c.halting.max_ponder == 0) c.halting.max_ponder = std::max<std::size_t>(1, n / 2);
    if (c.halting.tau == 0.0) c.halting.tau = static_cast<double>(c.halting.max_ponder) / 2.0;
    m.num_classes = 2;
    if (symbols_in_bank(m)) {
      m.input_len = 0;
      m.bank_len = n;
    } else {
      m.input_len = n;
    }
    m.input_dim = kParitySymbolDim;
    if (m.bank_kind == BankKind::kInputDriven) m.bank_dim = kParitySymbolDim;
  } else {
    const auto& im = c.image;
    if (im.input_patch == 0 || im.bank_patch == 0 || im.width % im.input_patch != 0 ||
        im.width % im.bank_patch != 0) {
      throw ConfigError("image patch sizes must divide image.width");
    }
    if (im.bank_patch >= im.input_patch) throw ConfigError("image.bank_patch must be smaller than image.input_patch");
    m.input_len = (im.width / im.input_patch) * (im.width / im.input_patch);
    m.input_dim = im.input_patch * im.input_patch;
    if (m.bank_kind == BankKind::kInputDriven) {
      m.bank_len = (im.width / im.bank_patch) * (im.width / im.bank_patch);
      m.bank_dim = im.bank_patch * im.bank_patch;
    }
  }
  m.validate();
  if (m.variant == Variant::kAdaTape) {
    c.halting.validate();
    c.halting.validate_for_bank(m.bank_len);
  }
  if (m.variant == Variant::kActDepth && m.depth < 1) throw ConfigError("act_depth needs depth >= 1");
  if (c.batch_size == 0 || c.eval_batch_size == 0) throw ConfigError("batch sizes must be positive");
  if (c.eval_every == 0) throw ConfigError("eval_every must be positive");
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) throw ConfigError("lambda must be a finite non-negative number");
  const auto& o = c.optimizer;
  if (!(o.lr > 0.0) || !(o.beta1 >= 0.0 && o.beta1 < 1.0) || !(o.beta2 >= 0.0 && o.beta2 < 1.0) || !(o.eps > 0.0) ||
      !(o.weight_decay >= 0.0)) {
    throw ConfigError("optimizer settings out of range");
  }
  if (c.task == TaskKind::kParity && c.parity.eval_samples == 0) throw ConfigError("parity.eval_samples must be positive");
}

void apply_seed_override(RunConfig& config) {
  const char* env = std::getenv("ADATAPE_SEED");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (errno != 0 || *end != '\0' || env[0] == '-') throw ConfigError(std::string("ADATAPE_SEED is not an unsigned integer: ") + env);
  config.seed = v;
}

// --- data -----------------------------------------------------------------------

namespace {

constexpr std::uint64_t kEvalStream = 0xE7A1u;
constexpr std::uint64_t kTrainImageStream = 0x7A11u;
constexpr std::uint64_t kDataStream = 0xD1B54A32D192ED03ULL;
constexpr std::uint64_t kTrickStream = 0x8CB92BA72F3D8DD7ULL;

class TaskData {
 public:
  explicit TaskData(const RunConfig& c) : config_(c) {
    if (c.task == TaskKind::kImage) {
      train_ = load_images(c.image.train_images, c.image.train_labels, c.image.synthetic_train, c.seed + kTrainImageStream);
      eval_ = load_images(c.image.eval_images, c.image.eval_labels, c.image.synthetic_eval, c.seed + kEvalStream);
    }
  }

  Batch train_batch(Rng& rng) const {
    if (config_.task == TaskKind::kParity) {
      auto samples = gen_parity(config_.parity.length, config_.batch_size, rng());
      return parity_batch(samples);
    }
    std::uniform_int_distribution<std::size_t> pick(0, train_.count - 1);
    std::vector<std::size_t> idx(config_.batch_size);
    for (auto& i : idx) i = pick(rng);
    return image_batch(train_, idx, config_.image.input_patch, config_.image.bank_patch);
  }

  std::vector<Batch> eval_batches() const {
    std::vector<Batch> out;
    const std::size_t bs = config_.eval_batch_size;
    if (config_.task == TaskKind::kParity) {
      auto samples = gen_parity(config_.parity.length, config_.parity.eval_samples, config_.seed + kEvalStream);
      for (std::size_t b = 0; b < samples.size(); b += bs) {
        std::span<const ParitySample> part(samples.data() + b, std::min(bs, samples.size() - b));
        out.push_back(parity_batch(part));
      }
      return out;
    }
    for (std::size_t b = 0; b < eval_.count; b += bs) {
      std::vector<std::size_t> idx(std::min(bs, eval_.count - b));
      std::iota(idx.begin(), idx.end(), b);
      out.push_back(image_batch(eval_, idx, config_.image.input_patch, config_.image.bank_patch));
    }
    return out;
  }

 private:
  Batch parity_batch(std::span<const ParitySample> samples) const {
    return symbols_in_bank(config_.model) ? parity_bank_batch(samples) : parity_token_batch(samples);
  }

  ImageSet load_images(const std::string& images, const std::string& labels, std::size_t synthetic_count,
                       std::uint64_t seed) const {
    ImageSet set;
    if (images.empty() != labels.empty()) throw ConfigError("image and label paths must be given together");
    if (images.empty()) {
      set = synthetic_images(synthetic_count, config_.image.width, config_.model.num_classes, seed);
    } else {
      set = load_image_set(images, labels);
    }
    if (set.count == 0) throw ConfigError("image set is empty");
    if (set.width != config_.image.width) {
      throw ConfigError("image width " + std::to_string(set.width) + " does not match image.width " +
                        std::to_string(config_.image.width));
    }
    for (int l : set.labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= config_.model.num_classes) {
        throw ConfigError("label " + std::to_string(l) + " outside [0, num_classes)");
      }
    }
    return set;
  }

  const RunConfig& config_;
  ImageSet train_, eval_;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

SeqStats seq_stats(std::span<const std::size_t> lengths) {
  SeqStats s;
  if (lengths.empty()) return s;
  double total = 0.0;
  std::size_t longest = 0;
  for (auto l : lengths) {
    total += static_cast<double>(l);
    longest = std::max(longest, l);
  }
  s.avg = total / static_cast<double>(lengths.size());
  s.max = static_cast<double>(longest);
  double sq = 0.0;
  for (auto l : lengths) sq += (static_cast<double>(l) - s.avg) * (static_cast<double>(l) - s.avg);
  s.var = sq / static_cast<double>(lengths.size());
  return s;
}

namespace {

EvalMetrics evaluate_batches(const AdaTapeModel<float>& model, const std::vector<Batch>& batches) {
  NoGradGuard no_grad;
  EvalMetrics m;
  std::size_t correct = 0;
  double ponder = 0.0;
  for (const Batch& b : batches) {
    EncodeOutput<float> out = model.encode(b);
    const std::size_t classes = out.logits.dim(1);
    auto logits = out.logits.data();
    for (std::size_t i = 0; i < b.size; ++i) {
      auto row = logits.subspan(i * classes, classes);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == b.labels[i]) ++correct;
    }
    m.seq_lengths.insert(m.seq_lengths.end(), out.seq_lengths.begin(), out.seq_lengths.end());
    for (double p : out.ponder_per_sample) ponder += p;
    for (auto& t : out.traces) m.traces.push_back(std::move(t));
    m.samples += b.size;
  }
  if (m.samples > 0) {
    m.accuracy = static_cast<double>(correct) / static_cast<double>(m.samples);
    m.mean_ponder = ponder / static_cast<double>(m.samples);
  }
  m.seq = seq_stats(m.seq_lengths);
  return m;
}

}  // namespace

EvalMetrics evaluate_model(const AdaTapeModel<float>& model, const RunConfig& config) {
  TaskData data(config);
  return evaluate_batches(model, data.eval_batches());
}

// --- checkpoints ------------------------------------------------------------------

void save_model_checkpoint(const fs::path& path, const AdaTapeModel<float>& model, const RunConfig& config) {
  std::vector<CheckpointEntry> entries;
  // where the run wrote its files is not part of the model; leaving it out
  // keeps checkpoints of identical runs byte-identical
  RunConfig stored = config;
  stored.output_dir.clear();
  entries.push_back(text_entry("config.json", run_config_json(stored)));
  entries.push_back({"meta.step", {1}, {static_cast<float>(model.params().step())}});
  auto params = to_entries(model.params());
  entries.insert(entries.end(), std::make_move_iterator(params.begin()), std::make_move_iterator(params.end()));
  write_checkpoint(path, entries);
}

AdaTapeModel<float> load_model_checkpoint(const fs::path& path, RunConfig& config,
                                          const std::optional<RunConfig>& override_config) {
  auto entries = read_checkpoint(path);
  if (override_config) {
    config = *override_config;
  } else {
    const CheckpointEntry* doc = find_entry(entries, "config.json");
    if (doc == nullptr) throw FormatError(path.string() + ": checkpoint has no config.json entry");
    config = parse_run_config(entry_text(*doc));
  }
  resolve_run_config(config);
  AdaTapeModel<float> model(config.model, config.halting, config.seed);
  try {
    load_entries(model.params(), entries);
  } catch (const ShapeError& e) {
    throw ShapeError(path.string() + ": " + e.what());
  }
  if (const CheckpointEntry* step = find_entry(entries, "meta.step"); step && step->values.size() == 1) {
    model.params().set_step(static_cast<std::int64_t>(step->values[0]));
  }
  return model;
}

EvalMetrics evaluate_checkpoint(const fs::path& checkpoint, const fs::path& out_dir,
                                const std::optional<RunConfig>& override_config) {
  RunConfig config;
  AdaTapeModel<float> model = load_model_checkpoint(checkpoint, config, override_config);
  EvalMetrics m = evaluate_model(model, config);
  fs::create_directories(out_dir);
  std::string csv = "samples,accuracy,avg_seq_len,max_seq_len,var_seq_len,mean_ponder\n";
  csv += std::to_string(m.samples) + "," + num(m.accuracy) + "," + num(m.seq.avg) + "," + num(m.seq.max) + "," +
         num(m.seq.var) + "," + num(m.mean_ponder) + "\n";
  write_text_atomic(out_dir / "eval.csv", csv);
  if (!m.traces.empty()) {
    std::vector<std::size_t> ids(m.traces.size());
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    write_text_atomic(out_dir / "traces.csv", trace_csv(m.traces, ids));
  }
  return m;
}

// --- training -------------------------------------------------------------------

namespace {

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

[[noreturn]] void abort_non_finite(const fs::path& out, const AdaTapeModel<float>& model, const RunConfig& config,
                                   std::size_t step, double main_loss, double ponder_loss, const std::string& what) {
  save_model_checkpoint(out / "last_good.atkp", model, config);
  std::string dump = "non-finite " + what + " at step " + std::to_string(step) + "\n";
  dump += "main_loss " + num(main_loss) + "\nponder_loss " + num(ponder_loss) + "\n";
  for (const auto& e : model.params().entries()) {
    const bool bad_value = !all_finite(e.value.data());
    const bool bad_grad = e.value.has_grad() && !all_finite(e.value.grad());
    if (bad_value || bad_grad) {
      dump += e.name + (bad_value ? " value" : "") + (bad_grad ? " grad" : "") + "\n";
    }
  }
  write_text_atomic(out / "nan_dump.txt", dump);
  throw NumericError("non-finite " + what + " at step " + std::to_string(step) + "; wrote " +
                     (out / "last_good.atkp").string() + " and " + (out / "nan_dump.txt").string());
}

}  // namespace

TrainResult train(const RunConfig& input) {
  RunConfig config = input;
  resolve_run_config(config);
  const fs::path out = config.output_dir;
  fs::create_directories(out);

  TaskData data(config);
  const std::vector<Batch> eval_set = data.eval_batches();
  AdaTapeModel<float> model(config.model, config.halting, config.seed);
  OptimState<float> opt;
  opt.hp = {config.optimizer.lr, config.optimizer.beta1, config.optimizer.beta2, config.optimizer.eps,
            config.optimizer.weight_decay};
  Rng data_rng(config.seed ^ kDataStream);
  Rng trick_rng(config.seed ^ kTrickStream);
  const auto start = std::chrono::steady_clock::now();
  const auto lambda = static_cast<float>(config.lambda);

  std::string metrics = std::string(kMetricsHeader) + "\n";
  TrainResult result;
  for (std::size_t step = 0; step < config.steps; ++step) {
    Batch batch = data.train_batch(data_rng);
    EncodeOutput<float> enc;
    try {
      enc = model.encode(batch, EncodeOptions{true, &trick_rng});
    } catch (const NumericError& e) {
      abort_non_finite(out, model, config, step, NAN, NAN, std::string("forward value (") + e.what() + ")");
    }
    Tensor<float> main_loss = cross_entropy(enc.logits, batch.labels);
    Tensor<float> ponder_loss = scale(enc.ponder_loss, lambda);
    Tensor<float> loss = add(main_loss, ponder_loss);
    const double main_v = main_loss.item(), ponder_v = ponder_loss.item();
    if (!std::isfinite(loss.item())) abort_non_finite(out, model, config, step, main_v, ponder_v, "loss");
    loss.backward();
    for (const auto& e : model.params().entries()) {
      if (e.value.has_grad() && !all_finite(e.value.grad())) {
        abort_non_finite(out, model, config, step, main_v, ponder_v, "gradient");
      }
    }
    opt.hp.lr = scheduled_lr(config.optimizer.lr, static_cast<std::int64_t>(step),
                             static_cast<std::int64_t>(config.optimizer.warmup_steps),
                             static_cast<std::int64_t>(config.steps), config.optimizer.schedule);
    adamw_step(model.params(), opt);

    const std::size_t done = step + 1;
    if (done % config.eval_every == 0 || done == config.steps) {
      result.final_eval = evaluate_batches(model, eval_set);
      const auto& ev = result.final_eval;
      const double wall =
          config.log_wallclock
              ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()
              : 0.0;
      metrics += std::to_string(done) + "," + num(main_v + ponder_v) + "," + num(main_v) + "," + num(ponder_v) + "," +
                 num(ev.accuracy) + "," + num(ev.seq.avg) + "," + num(ev.seq.max) + "," + num(ev.seq.var) + "," +
                 num(wall) + "\n";
      write_text_atomic(out / "metrics.csv", metrics);
    }
  }
  if (config.steps == 0) result.final_eval = evaluate_batches(model, eval_set);

  result.steps = config.steps;
  result.metrics = out / "metrics.csv";
  result.checkpoint = out / "checkpoint.atkp";
  write_text_atomic(result.metrics, metrics);
  save_model_checkpoint(result.checkpoint, model, config);
  return result;
}

// --- heatmaps -------------------------------------------------------------------

Heatmap selection_heatmap(std::span<const TraceRow> trace, std::size_t rows, std::size_t cols) {
  if (trace.empty()) throw ConfigError("heatmap: no trace rows");
  if (rows == 0 || cols == 0) throw ConfigError("heatmap: grid must be non-empty");
  Heatmap map{rows, cols, std::vector<std::uint64_t>(rows * cols, 0)};
  for (const auto& r : trace) {
    if (r.bank_index >= map.counts.size()) {
      throw ShapeError("heatmap: bank index " + std::to_string(r.bank_index) + " outside a " + std::to_string(rows) +
                       "x" + std::to_string(cols) + " grid");
    }
    ++map.counts[r.bank_index];
  }
  return map;
}

std::vector<std::uint8_t> heatmap_pgm(const Heatmap& map) {
  const std::string header = "P5\n" + std::to_string(map.cols) + " " + std::to_string(map.rows) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const std::uint64_t peak = *std::max_element(map.counts.begin(), map.counts.end());
  for (auto c : map.counts) out.push_back(peak == 0 ? 0 : static_cast<std::uint8_t>((c * 255 + peak / 2) / peak));
  return out;
}

std::string heatmap_counts_csv(const Heatmap& map) {
  std::string csv = "row,col,bank_index,count\n";
  for (std::size_t i = 0; i < map.counts.size(); ++i) {
    csv += std::to_string(i / map.cols) + "," + std::to_string(i % map.cols) + "," + std::to_string(i) + "," +
           std::to_string(map.counts[i]) + "\n";
  }
  return csv;
}

std::string heatmap_frequency_csv(const Heatmap& map) {
  std::vector<std::size_t> order(map.counts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return map.counts[a] > map.counts[b]; });
  const double total =
      static_cast<double>(std::accumulate(map.counts.begin(), map.counts.end(), std::uint64_t{0}));
  std::string csv = "rank,bank_index,count,fraction\n";
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto c = map.counts[order[r]];
    csv += std::to_string(r + 1) + "," + std::to_string(order[r]) + "," + std::to_string(c) + "," +
           num(total > 0 ? static_cast<double>(c) / total : 0.0) + "\n";
  }
  return csv;
}

Heatmap emit_heatmap(std::span<const TraceRow> trace, std::size_t rows, std::size_t cols, const fs::path& out_dir) {
  Heatmap map = selection_heatmap(trace, rows, cols);
  fs::create_directories(out_dir);
  write_file_atomic(out_dir / "heatmap.pgm", heatmap_pgm(map));
  write_text_atomic(out_dir / "heatmap_counts.csv", heatmap_counts_csv(map));
  write_text_atomic(out_dir / "selection_frequency.csv", heatmap_frequency_csv(map));
  return map;
}

// --- sweep and diagnostics -------------------------------------------------------

std::vector<SweepRow> parity_sweep(const RunConfig& base) {
  if (base.task != TaskKind::kParity) throw ConfigError("parity-sweep needs task parity");
  if (base.parity.sweep_lengths.empty() || base.parity.sweep_variants.empty()) {
    throw ConfigError("parity-sweep needs sweep_lengths and sweep_variants");
  }
  std::vector<SweepRow> rows;
  std::string csv = "variant,length,accuracy,avg_seq_len,max_seq_len,var_seq_len\n";
  for (Variant v : base.parity.sweep_variants) {
    for (std::size_t n : base.parity.sweep_lengths) {
      RunConfig c = base;
      c.parity.length = n;
      c.model.variant = v;
      c.halting.tau = 0.0;
      c.halting.max_ponder = 0;
      c.output_dir = (fs::path(base.output_dir) / (variant_name(v) + "_n" + std::to_string(n))).string();
      resolve_run_config(c);
      TrainResult r = train(c);
      r.final_eval.traces.clear();
      const auto& m = r.final_eval;
      csv += variant_name(v) + "," + std::to_string(n) + "," + num(m.accuracy) + "," + num(m.seq.avg) + "," +
             num(m.seq.max) + "," + num(m.seq.var) + "\n";
      rows.push_back({v, n, std::move(r.final_eval)});
    }
  }
  fs::create_directories(base.output_dir);
  write_text_atomic(fs::path(base.output_dir) / "sweep.csv", csv);
  return rows;
}

GradCheckReport model_grad_check(const RunConfig& input, std::size_t probes, std::size_t batch_size) {
  RunConfig config = input;
  config.batch_size = batch_size;
  resolve_run_config(config);
  AdaTapeModel<double> model(config.model, config.halting, config.seed);
  Batch batch;
  if (config.task == TaskKind::kParity) {
    auto samples = gen_parity(config.parity.length, batch_size, config.seed + kEvalStream);
    batch = symbols_in_bank(config.model) ? parity_bank_batch(samples) : parity_token_batch(samples);
  } else {
    ImageSet set = synthetic_images(batch_size, config.image.width, config.model.num_classes, config.seed);
    std::vector<std::size_t> idx(batch_size);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    batch = image_batch(set, idx, config.image.input_patch, config.image.bank_patch);
  }
  const double lambda = config.lambda;
  LossFn loss = [&](ParamStore<double>&) {
    EncodeOutput<double> out = model.encode(batch);
    return add(cross_entropy(out.logits, batch.labels), scale(out.ponder_loss, lambda));
  };
  GradCheckOptions options;
  options.samples = probes;
  options.seed = config.seed;
  return grad_check(loss, model.params(), options);
}

LnDiagResult layernorm_diagnostic(std::size_t pairs, std::size_t dim, std::uint64_t seed,
                                  std::optional<double> fixed_p) {
  if (dim < 2) throw ConfigError("lndiag needs dim >= 2");
  if (fixed_p && *fixed_p == 0.0) throw ConfigError("lndiag: p must be non-zero");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  LnDiagResult r;
  std::vector<double> z(dim);
  for (std::size_t i = 0; i < pairs; ++i) {
    const double magnitude = std::exp(4.0 * unit(rng) - 2.0);
    for (double& v : z) v = magnitude * normal(rng);
    const double p = fixed_p ? *fixed_p : 10.0 * (1.0 - unit(rng));
    r.max_deviation = std::max(r.max_deviation, layernorm_absorption_deviation(p, z));
    ++r.pairs;
  }
  return r;
}

}  // namespace adatape

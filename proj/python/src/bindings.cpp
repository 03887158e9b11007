// SPDX-License-Identifier: Apache-2.0
#include <optional>
#include <string>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "adatape/errors.hpp"
#include "adatape/halting.hpp"
#include "adatape/harness.hpp"

namespace py = pybind11;
using namespace adatape;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

py::dict eval_dict(const EvalMetrics& m) {
  py::dict d;
  d["samples"] = m.samples;
  d["accuracy"] = m.accuracy;
  d["avg_seq_len"] = m.seq.avg;
  d["max_seq_len"] = m.seq.max;
  d["var_seq_len"] = m.seq.var;
  d["mean_ponder"] = m.mean_ponder;
  d["seq_lengths"] = m.seq_lengths;
  return d;
}

RunConfig config_from_json(const std::string& text) { return parse_run_config(text); }

py::dict py_atr_read(const DoubleArray& query, const DoubleArray& bank, double tau, std::size_t max_ponder,
                     std::optional<std::size_t> key_dim, const std::string& loss, const std::string& update,
                     bool adaptive_length) {
  if (query.ndim() != 1 || bank.ndim() != 2 || bank.shape(1) != query.shape(0)) {
    throw ShapeError("atr_read expects query [H] and bank [B, H]");
  }
  const auto H = static_cast<std::size_t>(query.shape(0)), B = static_cast<std::size_t>(bank.shape(0));
  AtrConfig cfg;
  cfg.tau = tau;
  cfg.max_ponder = max_ponder;
  if (loss == "entropy") cfg.loss_variant = PonderLoss::kEntropy;
  else if (loss == "collect") cfg.loss_variant = PonderLoss::kCollect;
  else throw ConfigError("loss must be 'entropy' or 'collect'");
  if (update == "average") cfg.query_update = QueryUpdate::kAverage;
  else if (update == "replace") cfg.query_update = QueryUpdate::kReplace;
  else throw ConfigError("query_update must be 'average' or 'replace'");
  cfg.adaptive_length = adaptive_length;
  cfg.validate_for_bank(B);

  auto q = Tensor<double>::from_vector(Shape{1, H}, std::vector<double>(query.data(), query.data() + H));
  auto b = Tensor<double>::from_vector(Shape{B, H}, std::vector<double>(bank.data(), bank.data() + B * H));
  AtrResult<double> r;
  {
    NoGradGuard no_grad;
    r = atr_read(q, TapeBank<double>{b, BankKind::kLearnable, key_dim.value_or(H)}, cfg);
  }
  const std::size_t n = r.trace.tape_length();
  py::array_t<double> tape({n, H});
  std::copy(r.tape.data().begin(), r.tape.data().end(), tape.mutable_data());
  py::list indices, weights, scores;
  for (const auto& it : r.trace.iterations) {
    indices.append(py::cast(it.indices));
    weights.append(py::cast(it.weights));
    scores.append(it.halting_score);
  }
  py::dict d;
  d["tape"] = tape;
  d["indices"] = indices;
  d["weights"] = weights;
  d["halting_scores"] = scores;
  d["ponder_loss"] = r.trace.ponder_loss;
  return d;
}

class PyModel {
 public:
  explicit PyModel(const std::string& checkpoint) : model_(load_model_checkpoint(checkpoint, config_)) {}

  std::string config_json() const { return run_config_json(config_); }

  py::dict encode_parity(const IntArray& symbols) const {
    if (symbols.ndim() != 2) throw ShapeError("symbols must be [batch, length]");
    const auto count = static_cast<std::size_t>(symbols.shape(0)), len = static_cast<std::size_t>(symbols.shape(1));
    std::vector<ParitySample> samples(count);
    for (std::size_t i = 0; i < count; ++i) {
      samples[i].symbols.assign(symbols.data() + i * len, symbols.data() + (i + 1) * len);
      samples[i].label = parity_label(samples[i].symbols);
    }
    const bool bank = config_.model.variant == Variant::kAdaTape && config_.model.bank_kind == BankKind::kInputDriven;
    Batch batch = bank ? parity_bank_batch(samples) : parity_token_batch(samples);
    NoGradGuard no_grad;
    auto out = model_.encode(batch);
    const std::size_t classes = out.logits.dim(1);
    py::array_t<float> logits({count, classes});
    std::copy(out.logits.data().begin(), out.logits.data().end(), logits.mutable_data());
    py::dict d;
    d["logits"] = logits;
    d["seq_lengths"] = out.seq_lengths;
    d["ponder"] = out.ponder_per_sample;
    return d;
  }

  py::dict evaluate() const { return eval_dict(evaluate_model(model_, config_)); }

 private:
  RunConfig config_;
  AdaTapeModel<float> model_;
};

}  // namespace

PYBIND11_MODULE(_adatape, m) {
  m.doc() = "AdaTape core bindings";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<BankExhaustedError>(m, "BankExhaustedError", base.ptr());
  auto format = py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<LengthError>(m, "LengthError", format.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());

  m.def(
      "default_config",
      [](const std::string& task) {
        return run_config_json(default_run_config(task == "image" ? TaskKind::kImage : TaskKind::kParity));
      },
      py::arg("task") = "parity", "Default run config as JSON text.");
  m.def(
      "resolve_config", [](const std::string& text) { return run_config_json(config_from_json(text)); },
      py::arg("config_json"), "Parse, validate and fill task-dependent fields; returns JSON text.");

  m.def(
      "train",
      [](const std::string& text) {
        RunConfig c = config_from_json(text);
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(c);
        }
        py::dict d = eval_dict(r.final_eval);
        d["steps"] = r.steps;
        d["metrics"] = r.metrics;
        d["checkpoint"] = r.checkpoint;
        return d;
      },
      py::arg("config_json"), "Train; writes metrics.csv and checkpoint.atkp under output_dir.");

  m.def(
      "evaluate_checkpoint",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir) {
        return eval_dict(evaluate_checkpoint(checkpoint, out_dir));
      },
      py::arg("checkpoint"), py::arg("out_dir"), "Evaluate; writes eval.csv and traces.csv.");

  m.def(
      "gen_parity",
      [](std::size_t length, std::size_t count, std::uint64_t seed) {
        auto s = gen_parity(length, count, seed);
        py::array_t<int> symbols({count, length});
        py::array_t<int> labels(count);
        for (std::size_t i = 0; i < count; ++i) {
          std::copy(s[i].symbols.begin(), s[i].symbols.end(), symbols.mutable_data() + i * length);
          labels.mutable_data()[i] = s[i].label;
        }
        return py::make_tuple(symbols, labels);
      },
      py::arg("length"), py::arg("count"), py::arg("seed") = 0);

  m.def("atr_read", &py_atr_read, py::arg("query"), py::arg("bank"), py::arg("tau"), py::arg("max_ponder"),
        py::arg("key_dim") = py::none(), py::arg("loss") = "entropy", py::arg("query_update") = "average",
        py::arg("adaptive_length") = true, "Adaptive tape reading on one query against a fixed bank.");

  m.def(
      "layernorm_diagnostic",
      [](std::size_t pairs, std::size_t dim, std::uint64_t seed, std::optional<double> p) {
        return layernorm_diagnostic(pairs, dim, seed, p).max_deviation;
      },
      py::arg("pairs") = 1000, py::arg("dim") = 64, py::arg("seed") = 0, py::arg("p") = py::none());

  m.def(
      "grad_check",
      [](const std::string& text, std::size_t probes, std::size_t batch) {
        GradCheckReport r = model_grad_check(config_from_json(text), probes, batch);
        py::dict d;
        d["max_rel_error"] = r.max_rel_error;
        d["passed"] = r.passed;
        std::size_t checked = 0;
        for (const auto& p : r.params) checked += p.checked;
        d["checked"] = checked;
        return d;
      },
      py::arg("config_json"), py::arg("probes") = 20, py::arg("batch") = 4);

  m.def(
      "synthetic_images",
      [](std::size_t count, std::size_t width, std::size_t classes, std::uint64_t seed) {
        ImageSet s = synthetic_images(count, width, classes, seed);
        py::array_t<double> pixels({count, width, width});
        std::copy(s.pixels.begin(), s.pixels.end(), pixels.mutable_data());
        return py::make_tuple(pixels, py::cast(s.labels));
      },
      py::arg("count"), py::arg("width") = 28, py::arg("classes") = 10, py::arg("seed") = 0);

  m.def(
      "patchify",
      [](const DoubleArray& image, std::size_t patch) {
        if (image.ndim() != 2 || image.shape(0) != image.shape(1)) throw ShapeError("image must be square [W, W]");
        const auto w = static_cast<std::size_t>(image.shape(0));
        auto p = patchify(std::span<const double>(image.data(), w * w), w, patch);
        const std::size_t side = w / patch;
        py::array_t<double> out({side * side, patch * patch});
        std::copy(p.begin(), p.end(), out.mutable_data());
        return out;
      },
      py::arg("image"), py::arg("patch"));

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def_property_readonly("config_json", &PyModel::config_json)
      .def("encode_parity", &PyModel::encode_parity, py::arg("symbols"))
      .def("evaluate", &PyModel::evaluate);
}

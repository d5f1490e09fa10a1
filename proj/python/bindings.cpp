#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "spanqa/binary_io.hpp"
#include "spanqa/checkpoint.hpp"
#include "spanqa/embeddings.hpp"
#include "spanqa/error.hpp"
#include "spanqa/evaluator.hpp"
#include "spanqa/heads.hpp"
#include "spanqa/loss_opt.hpp"
#include "spanqa/squad.hpp"
#include "spanqa/trainer.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace spanqa;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

template <typename T>
py::array_t<T> to_numpy(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

template <typename T, typename A>
Tensor<T> from_numpy(const A& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<T> data(a.data(), a.data() + a.size());
  return Tensor<T>(std::move(shape), std::move(data));
}

Tensor<double> vector_from(const Array& a, const char* what) {
  if (a.ndim() != 1) throw Error(ErrorKind::kShape, std::string(what) + " must be one-dimensional");
  return from_numpy<double>(a);
}

// A head with double-precision parameters, for inspection from Python.
class Head {
 public:
  Head(HeadConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    model_ = make_head<double>(config_);
    params_ = model_->init_params(seed);
  }

  static Head from_checkpoint(const HeadConfig& config, const fs::path& path) {
    Head h(config, 0);
    h.params_ = load_checkpoint_for(path, config).cast<double>();
    return h;
  }

  const HeadConfig& config() const { return config_; }
  std::size_t num_parameters() const { return params_.num_parameters(); }

  py::dict parameters() const {
    py::dict out;
    for (const auto& [name, t] : params_.params()) out[py::str(name)] = to_numpy(t);
    return out;
  }

  void set_parameter(const std::string& name, const Array& value) {
    auto& p = params_.param(name);
    auto t = from_numpy<double>(value);
    require_shape(t.shape() == p.shape(), "set_parameter", t.shape(), p.shape());
    p = std::move(t);
  }

  py::tuple forward(const Array& x, std::size_t valid_len, double keep_prob, std::uint64_t seed) const {
    const auto logits = model_->forward(params_, from_numpy<double>(x), valid_len, {keep_prob, seed});
    return py::make_tuple(to_numpy(logits.start), to_numpy(logits.end));
  }

  py::tuple loss_and_grads(const Array& x, std::size_t valid_len, std::size_t start, std::size_t end) const {
    std::unique_ptr<HeadTape> tape;
    const auto logits = model_->forward(params_, from_numpy<double>(x), valid_len, {}, &tape);
    const auto res = span_loss(logits, start, end);
    auto grads = params_.zero_grads();
    model_->backward(params_, *tape, res.grad, grads);
    py::dict g;
    for (const auto& [name, t] : grads) g[py::str(name)] = to_numpy(t);
    return py::make_tuple(res.loss, g);
  }

  py::array_t<double> filters(const Array& x, std::size_t valid_len) const {
    return to_numpy(generated_filters(config_, params_, from_numpy<double>(x), valid_len));
  }

  void save(const fs::path& path) const {
    save_checkpoint(path, params_.cast<float>().params(), config_.digest());
  }

 private:
  HeadConfig config_;
  std::unique_ptr<HeadModel<double>> model_;
  ParamStore<double> params_;
};

py::dict train_summary(const RunConfig& config) {
  config.validate();
  const auto source = make_embedding_source(config.embeddings);
  const auto split = load_train_eval(config);
  const auto r = train(config, split.train, split.eval, *source);
  py::dict d;
  d["train_examples"] = split.train.size();
  d["eval_examples"] = split.eval.size();
  d["train_features"] = r.train_features;
  d["skipped_examples"] = r.skipped_examples;
  d["train_steps"] = r.plan.train_steps;
  d["eval_events"] = r.plan.eval_events;
  d["steps_run"] = r.steps_run;
  d["early_stopped"] = r.early_stopped;
  d["best_eval_loss"] = r.best_eval_loss;
  py::list rows;
  for (const auto& m : r.metrics) {
    py::dict row;
    row["step"] = m.step;
    row["train_loss"] = m.train_loss;
    row["eval_loss"] = m.eval_loss;
    row["eval_em"] = m.eval_em;
    row["eval_f1"] = m.eval_f1;
    row["learning_rate"] = m.learning_rate;
    rows.append(row);
  }
  d["metrics"] = rows;
  return d;
}

std::vector<Prediction> predict_with_run(const fs::path& checkpoint, const fs::path& squad,
                                         const fs::path& run_config, const std::string& embeddings) {
  auto saved = load_saved_run(run_config);
  if (!embeddings.empty()) saved.embeddings = embeddings;
  const auto source = make_embedding_source(saved.embeddings);
  auto model = make_head<float>(saved.head);
  const auto params = load_checkpoint_for(checkpoint, saved.head);
  return predict(*model, params, load_squad_file(squad), *source, saved.max_seq_len,
                 saved.max_answer_len);
}

py::object json_to_python(const std::string& doc) {
  return py::module_::import("json").attr("loads")(doc);
}

}  // namespace

PYBIND11_MODULE(_spanqa, m) {
  m.doc() = "Span-extraction question answering heads over frozen token embeddings";

  static py::exception<Error> error_type(m, "SpanqaError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object inst = py::reinterpret_borrow<py::object>(error_type.ptr())(py::str(e.what()));
      inst.attr("kind") = py::str(std::string(error_kind_name(e.kind())));
      PyErr_SetObject(error_type.ptr(), inst.ptr());
    }
  });

  // data
  py::class_<Answer>(m, "Answer")
      .def(py::init<>())
      .def(py::init([](std::string text, std::size_t start) { return Answer{std::move(text), start}; }),
           py::arg("text"), py::arg("char_start"))
      .def_readwrite("text", &Answer::text)
      .def_readwrite("char_start", &Answer::char_start);

  py::class_<SquadExample>(m, "SquadExample")
      .def(py::init<>())
      .def_readwrite("qid", &SquadExample::qid)
      .def_readwrite("question", &SquadExample::question)
      .def_readwrite("context", &SquadExample::context)
      .def_readwrite("answers", &SquadExample::answers)
      .def_readwrite("is_impossible", &SquadExample::is_impossible)
      .def_readwrite("article", &SquadExample::article)
      .def("__repr__", [](const SquadExample& e) { return "<SquadExample " + e.qid + ">"; });

  m.def("parse_squad_json", &parse_squad_json, py::arg("document"));
  m.def("load_squad_file", &load_squad_file, py::arg("path"));
  m.def(
      "tokenize",
      [](std::string_view text) {
        std::vector<std::tuple<std::string, std::size_t, std::size_t>> out;
        for (auto& t : tokenize(text)) out.emplace_back(std::move(t.text), t.char_start, t.char_end);
        return out;
      },
      py::arg("text"));

  py::class_<Feature>(m, "Feature")
      .def_readonly("qid", &Feature::qid)
      .def_readonly("tokens", &Feature::tokens)
      .def_readonly("max_seq_len", &Feature::max_seq_len)
      .def_readonly("valid_len", &Feature::valid_len)
      .def_readonly("context_offset", &Feature::context_offset)
      .def_readonly("token_to_char", &Feature::token_to_char)
      .def_readonly("start_pos", &Feature::start_pos)
      .def_readonly("end_pos", &Feature::end_pos)
      .def_readonly("is_impossible", &Feature::is_impossible)
      .def_readonly("context", &Feature::context)
      .def("span_text", &Feature::span_text, py::arg("first"), py::arg("last"));

  m.def(
      "featurize",
      [](const SquadExample& ex, std::size_t max_seq_len, bool training) {
        return featurize(ex, max_seq_len, training ? FeaturizeMode::kTraining : FeaturizeMode::kEvaluation);
      },
      py::arg("example"), py::arg("max_seq_len") = 384, py::arg("training") = true,
      "Returns None when a training answer falls outside the window.");
  m.def(
      "split_train_eval",
      [](const std::vector<SquadExample>& ex, double fraction, std::uint64_t seed) {
        auto s = split_train_eval(ex, fraction, seed);
        return py::make_tuple(s.train, s.eval);
      },
      py::arg("examples"), py::arg("fraction") = 0.1, py::arg("seed") = 0);
  m.def("epoch_batches", &epoch_batches, py::arg("n_items"), py::arg("batch_size"), py::arg("seed"),
        py::arg("epoch"));

  // embeddings
  m.def(
      "synthetic_embed",
      [](const Feature& f, std::size_t hidden, std::uint64_t seed) {
        return to_numpy(synthetic_embed(f, hidden, seed).embeddings);
      },
      py::arg("feature"), py::arg("hidden"), py::arg("seed") = 0);
  m.attr("BEMB_VERSION") = kBembVersion;
  py::class_<BembWriter>(m, "BembWriter")
      .def(py::init<const fs::path&, std::size_t>(), py::arg("path"), py::arg("hidden"))
      .def(
          "write",
          [](BembWriter& w, const std::string& qid, const FloatArray& rows) {
            w.write(qid, from_numpy<float>(rows));
          },
          py::arg("qid"), py::arg("embeddings"))
      .def("close", &BembWriter::close)
      .def("__enter__", [](BembWriter& w) -> BembWriter& { return w; })
      .def("__exit__", [](BembWriter& w, py::args) { w.close(); });
  m.def(
      "read_bemb",
      [](const fs::path& path) {
        BembReader r(path);
        py::list records;
        while (auto rec = r.next()) records.append(py::make_tuple(rec->qid, to_numpy(rec->embeddings)));
        return py::make_tuple(r.hidden(), records);
      },
      py::arg("path"), "Returns (H, [(qid, L x H float32 array), ...]).");
  m.def(
      "load_embeddings",
      [](const fs::path& path, const std::vector<Feature>& features, std::size_t hidden) {
        py::list out;
        for (auto& s : load_embeddings(path, features, hidden)) {
          out.append(py::make_tuple(s.feature, to_numpy(s.embeddings)));
        }
        return out;
      },
      py::arg("path"), py::arg("features"), py::arg("hidden"));

  // heads
  py::enum_<HeadVariant>(m, "HeadVariant")
      .value("FC", HeadVariant::kFullyConnected)
      .value("CNN", HeadVariant::kBasicCnn)
      .value("CTX_CNN", HeadVariant::kContextCnn)
      .value("LSTM", HeadVariant::kLstm);
  m.def("parse_head_variant", &parse_head_variant, py::arg("name"));

  py::class_<HeadConfig>(m, "HeadConfig")
      .def(py::init<>())
      .def_readwrite("variant", &HeadConfig::variant)
      .def_readwrite("hidden_size", &HeadConfig::hidden_size)
      .def_readwrite("kernel_widths", &HeadConfig::kernel_widths)
      .def_readwrite("filters_per_kernel", &HeadConfig::filters_per_kernel)
      .def_readwrite("lstm_hidden", &HeadConfig::lstm_hidden)
      .def_readwrite("context_channels", &HeadConfig::context_channels)
      .def_readwrite("generator_width", &HeadConfig::generator_width)
      .def_readwrite("applied_width", &HeadConfig::applied_width)
      .def_readwrite("dropout_keep_prob", &HeadConfig::dropout_keep_prob)
      .def("validate", &HeadConfig::validate)
      .def("digest", &HeadConfig::digest);
  m.def("expected_parameter_count", &expected_parameter_count, py::arg("config"));

  py::class_<Head>(m, "Head")
      .def(py::init<HeadConfig, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_static("from_checkpoint", &Head::from_checkpoint, py::arg("config"), py::arg("path"))
      .def_property_readonly("config", &Head::config)
      .def_property_readonly("num_parameters", &Head::num_parameters)
      .def("parameters", &Head::parameters)
      .def("set_parameter", &Head::set_parameter, py::arg("name"), py::arg("value"))
      .def("forward", &Head::forward, py::arg("x"), py::arg("valid_len"), py::arg("keep_prob") = 1.0,
           py::arg("seed") = 0, "Returns (start_logits, end_logits).")
      .def("loss_and_grads", &Head::loss_and_grads, py::arg("x"), py::arg("valid_len"), py::arg("start"),
           py::arg("end"))
      .def("generated_filters", &Head::filters, py::arg("x"), py::arg("valid_len"))
      .def("save", &Head::save, py::arg("path"));

  // loss and optimizer schedule
  m.def(
      "span_loss",
      [](const Array& start, const Array& end, std::size_t s, std::size_t e) {
        const auto r = span_loss(SpanLogits<double>{vector_from(start, "start"), vector_from(end, "end")}, s, e);
        return py::make_tuple(r.loss, to_numpy(r.grad.start), to_numpy(r.grad.end));
      },
      py::arg("start_logits"), py::arg("end_logits"), py::arg("start"), py::arg("end"));
  m.def("lr_schedule", &lr_schedule, py::arg("step"), py::arg("total_steps"), py::arg("warmup_fraction"),
        py::arg("base_lr"));

  // evaluation
  m.def("normalize_answer", &normalize_answer, py::arg("text"));
  m.def("em_score", &em_score, py::arg("prediction"), py::arg("golds"));
  m.def("f1_score", &f1_score, py::arg("prediction"), py::arg("golds"));

  py::class_<Prediction>(m, "Prediction")
      .def(py::init<>())
      .def_readwrite("qid", &Prediction::qid)
      .def_readwrite("span_text", &Prediction::span_text)
      .def_readwrite("start", &Prediction::start)
      .def_readwrite("end", &Prediction::end)
      .def_readwrite("best_nonnull_score", &Prediction::best_nonnull_score)
      .def_readwrite("null_score", &Prediction::null_score)
      .def_readwrite("score_diff", &Prediction::score_diff)
      .def_readwrite("text", &Prediction::text)
      .def("decide", &Prediction::decide, py::arg("tau"));
  m.def(
      "extract_best_span",
      [](const Array& start, const Array& end, const Feature& f, std::size_t max_answer_len) {
        return extract_best_span(SpanLogits<double>{vector_from(start, "start"), vector_from(end, "end")}, f,
                                 max_answer_len);
      },
      py::arg("start_logits"), py::arg("end_logits"), py::arg("feature"), py::arg("max_answer_len") = 30);

  py::class_<GoldAnswer>(m, "GoldAnswer")
      .def(py::init([](std::string qid, std::vector<std::string> texts) {
             return GoldAnswer{std::move(qid), std::move(texts)};
           }),
           py::arg("qid"), py::arg("texts"))
      .def_readwrite("qid", &GoldAnswer::qid)
      .def_readwrite("texts", &GoldAnswer::texts)
      .def_property_readonly("is_impossible", &GoldAnswer::is_impossible);
  m.def("golds_from_examples", &golds_from_examples, py::arg("examples"));
  m.def(
      "sweep_null_threshold",
      [](const std::vector<Prediction>& p, const std::vector<GoldAnswer>& g) {
        const auto c = sweep_null_threshold(p, g);
        return py::make_tuple(c.tau, c.f1);
      },
      py::arg("predictions"), py::arg("golds"), "Returns (tau, overall F1 percentage).");
  m.def(
      "report",
      [](const std::vector<Prediction>& p, const std::vector<GoldAnswer>& g, double tau) {
        return json_to_python(report_to_json(report(p, g, tau)));
      },
      py::arg("predictions"), py::arg("golds"), py::arg("tau") = 0.0);
  m.def(
      "evaluate",
      [](const std::vector<Prediction>& p, const std::vector<GoldAnswer>& g) {
        return json_to_python(evaluation_to_json(evaluate(p, g)));
      },
      py::arg("predictions"), py::arg("golds"));
  m.def("predictions_to_json", &predictions_to_json, py::arg("predictions"));
  m.def("null_odds_to_json", &null_odds_to_json, py::arg("predictions"));

  // training driver
  py::class_<StepPlan>(m, "StepPlan")
      .def_readonly("train_steps", &StepPlan::train_steps)
      .def_readonly("eval_events", &StepPlan::eval_events)
      .def_readonly("eval_interval", &StepPlan::eval_interval);
  m.def("compute_steps", &compute_steps, py::arg("n_samples"), py::arg("n_epochs"), py::arg("batch_size"));

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("head", &RunConfig::head)
      .def_readwrite("squad_path", &RunConfig::squad_path)
      .def_readwrite("eval_squad_path", &RunConfig::eval_squad_path)
      .def_readwrite("embeddings", &RunConfig::embeddings)
      .def_readwrite("split_fraction", &RunConfig::split_fraction)
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("epochs", &RunConfig::epochs)
      .def_readwrite("batch_size", &RunConfig::batch_size)
      .def_readwrite("max_seq_len", &RunConfig::max_seq_len)
      .def_readwrite("max_answer_len", &RunConfig::max_answer_len)
      .def_property(
          "learning_rate", [](const RunConfig& c) { return c.optimizer.learning_rate; },
          [](RunConfig& c, double v) { c.optimizer.learning_rate = v; })
      .def_property(
          "warmup_fraction", [](const RunConfig& c) { return c.optimizer.warmup_fraction; },
          [](RunConfig& c, double v) { c.optimizer.warmup_fraction = v; })
      .def_property(
          "weight_decay", [](const RunConfig& c) { return c.optimizer.weight_decay; },
          [](RunConfig& c, double v) { c.optimizer.weight_decay = v; })
      .def_readwrite("patience", &RunConfig::patience)
      .def_readwrite("out_dir", &RunConfig::out_dir)
      .def_readwrite("single_thread", &RunConfig::single_thread)
      .def_readwrite("threads", &RunConfig::threads)
      .def_readwrite("resume", &RunConfig::resume)
      .def_readwrite("quiet", &RunConfig::quiet);

  m.def("train", &train_summary, py::arg("config"), "Trains per the config and returns a summary with the metrics rows.");
  m.def("predict", &predict_with_run, py::arg("checkpoint"), py::arg("squad"), py::arg("run_config"),
        py::arg("embeddings") = "",
        "Predictions for a SQuAD file from a checkpoint and the run_config.json it was trained with.");
  m.def("write_prediction_files", &write_prediction_files, py::arg("out_dir"), py::arg("predictions"));
}

#include "spanqa/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "spanqa/binary_io.hpp"
#include "spanqa/checkpoint.hpp"
#include "spanqa/random.hpp"

namespace spanqa {

using json = nlohmann::json;
namespace fs = std::filesystem;

StepPlan compute_steps(std::size_t n_samples, std::size_t n_epochs, std::size_t batch_size) {
  if (n_samples < 1 || n_epochs < 1 || batch_size < 1) {
    throw Error(ErrorKind::kConfig, "compute_steps: all inputs must be >= 1");
  }
  StepPlan plan;
  plan.train_steps = n_samples * n_epochs / batch_size;
  plan.eval_events = std::max<std::size_t>(1, plan.train_steps / 1000);
  plan.eval_interval = plan.train_steps / plan.eval_events;
  return plan;
}

bool EarlyStopper::observe(double eval_loss) {
  if (eval_loss < best_) {
    best_ = eval_loss;
    bad_events_ = 0;
    return true;
  }
  ++bad_events_;
  return false;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.8g", v);
  return buf;
}

json row_to_json(const MetricsRow& r) {
  return {{"step", r.step},          {"train_loss", r.train_loss}, {"eval_loss", r.eval_loss},
          {"eval_em", r.eval_em},    {"eval_f1", r.eval_f1},       {"learning_rate", r.learning_rate},
          {"wall_seconds", r.wall_seconds}};
}

MetricsRow row_from_json(const json& j) {
  MetricsRow r;
  r.step = j.at("step").get<std::size_t>();
  r.train_loss = j.at("train_loss").get<double>();
  r.eval_loss = j.at("eval_loss").get<double>();
  r.eval_em = j.at("eval_em").get<double>();
  r.eval_f1 = j.at("eval_f1").get<double>();
  r.learning_rate = j.at("learning_rate").get<double>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

json head_to_json(const HeadConfig& h) {
  return {{"variant", std::string(head_variant_name(h.variant))},
          {"hidden_size", h.hidden_size},
          {"kernel_widths", h.kernel_widths},
          {"filters_per_kernel", h.filters_per_kernel},
          {"lstm_hidden", h.lstm_hidden},
          {"context_channels", h.context_channels},
          {"generator_width", h.generator_width},
          {"applied_width", h.applied_width},
          {"dropout_keep_prob", h.dropout_keep_prob}};
}

struct Prepared {
  std::vector<Feature> features;
  std::size_t skipped = 0;
};

Prepared prepare(const std::vector<SquadExample>& examples, std::size_t max_seq_len,
                 FeaturizeMode mode) {
  Prepared p;
  for (const auto& ex : examples) {
    try {
      auto f = featurize(ex, max_seq_len, mode);
      if (f) {
        p.features.push_back(std::move(*f));
      } else {
        ++p.skipped;
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kRange) throw;
      ++p.skipped;
    }
  }
  return p;
}

double feature_loss(const HeadModel<float>& model, const ParamStore<float>& params,
                    const Feature& f, const EmbeddingSource& embeddings) {
  const auto seq = embeddings.embed(f);
  const auto logits = model.forward(params, seq.embeddings, f.valid_len);
  return static_cast<double>(span_loss(logits, f.start_pos, f.end_pos).loss);
}

class Trainer {
 public:
  Trainer(const RunConfig& config, const std::vector<SquadExample>& train_set,
          const std::vector<SquadExample>& eval_set, const EmbeddingSource& embeddings,
          const TrainHooks& hooks)
      : config_(config),
        eval_set_(eval_set),
        golds_(golds_from_examples(eval_set)),
        embeddings_(embeddings),
        hooks_(hooks),
        stopper_(config.patience) {
    if (embeddings.hidden() != config.head.hidden_size) {
      throw Error(ErrorKind::kMismatch,
                  "embedding width " + std::to_string(embeddings.hidden()) +
                      " does not match head hidden size " +
                      std::to_string(config.head.hidden_size));
    }
    auto prepared = prepare(train_set, config.max_seq_len, FeaturizeMode::kTraining);
    train_features_ = std::move(prepared.features);
    result_.skipped_examples = prepared.skipped;
    result_.train_features = train_features_.size();
    if (train_features_.empty()) {
      throw Error(ErrorKind::kConfig, "no trainable examples after featurization");
    }
    if (eval_set_.empty()) throw Error(ErrorKind::kConfig, "evaluation set is empty");

    plan_ = compute_steps(train_features_.size(), config.epochs, config.batch_size);
    if (plan_.train_steps == 0) {
      throw Error(ErrorKind::kConfig,
                  "run has zero training steps (" + std::to_string(train_features_.size()) +
                      " samples x " + std::to_string(config.epochs) + " epochs < batch size " +
                      std::to_string(config.batch_size) + ")");
    }
    result_.plan = plan_;

    model_ = make_head<float>(config.head);
    params_ = model_->init_params(config.seed);
    AdamConfig opt = config.optimizer;
    opt.total_steps = plan_.train_steps;
    adam_ = make_adam_state(params_, opt);

    threads_ = config.single_thread ? 1 : config.threads;
    if (threads_ == 0) threads_ = std::max(1u, std::thread::hardware_concurrency());
    threads_ = std::min(threads_, config.batch_size);
    worker_grads_.assign(threads_, params_.zero_grads());

    fs::create_directories(config.out_dir);
    write_file_atomic(config.out_dir / "run_config.json", run_config_json());
  }

  TrainResult run() {
    BatchIterator batches(train_features_.size(), config_.batch_size, config_.seed);
    if (config_.resume) restore();
    batches.skip(step_);

    const auto started = std::chrono::steady_clock::now();
    auto elapsed = [&] {
      return wall_offset_ +
             std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    };

    while (step_ < plan_.train_steps && !result_.early_stopped) {
      const auto batch = batches.next();
      const double batch_loss = train_step(batch);
      loss_sum_ += batch_loss;
      loss_count_ += 1;

      if (step_ % plan_.eval_interval == 0 && events_done_ < plan_.eval_events) {
        evaluate_event(elapsed());
      }
      if (hooks_.stop_after_steps && step_ >= *hooks_.stop_after_steps &&
          step_ < plan_.train_steps) {
        save_state();
        break;
      }
    }
    if (step_ >= plan_.train_steps || result_.early_stopped) save_state();

    result_.steps_run = step_;
    result_.metrics = metrics_;
    result_.best_eval_loss = stopper_.best();
    result_.params = params_;
    write_file_atomic(config_.out_dir / "metrics.csv", metrics_csv(metrics_));
    write_file_atomic(config_.out_dir / "timing.csv", timing_csv(metrics_));
    return result_;
  }

 private:
  double train_step(const std::vector<std::size_t>& batch) {
    const std::size_t next_step = step_ + 1;
    const float scale = 1.0f / static_cast<float>(batch.size());
    const std::size_t workers = std::min(threads_, batch.size());
    std::vector<double> losses(batch.size(), 0.0);

    auto work = [&](std::size_t w) {
      auto& grads = worker_grads_[w];
      for (auto& [name, g] : grads) g.fill(0.0f);
      const std::size_t lo = batch.size() * w / workers;
      const std::size_t hi = batch.size() * (w + 1) / workers;
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t idx = batch[k];
        const Feature& f = train_features_[idx];
        const auto seq = embeddings_.embed(f);
        std::unique_ptr<HeadTape> tape;
        const DropoutSpec drop{config_.head.dropout_keep_prob,
                               mix_seed(mix_seed(config_.seed, next_step), idx)};
        const auto logits = model_->forward(params_, seq.embeddings, f.valid_len, drop, &tape);
        auto res = span_loss(logits, f.start_pos, f.end_pos);
        for (float& g : res.grad.start.data()) g *= scale;
        for (float& g : res.grad.end.data()) g *= scale;
        model_->backward(params_, *tape, res.grad, grads);
        losses[k] = static_cast<double>(res.loss);
      }
    };
    if (workers == 1) {
      work(0);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
      for (auto& t : pool) t.join();
    }

    double loss = 0.0;
    for (double l : losses) loss += l;
    loss /= static_cast<double>(batch.size());
    if (!std::isfinite(loss)) {
      throw Error(ErrorKind::kNumeric, "non-finite training loss at step " +
                                           std::to_string(next_step) +
                                           "; last good checkpoint left in place");
    }
    auto& total = worker_grads_[0];
    for (std::size_t w = 1; w < workers; ++w) {
      for (auto& [name, g] : total) {
        const auto& other = worker_grads_[w].at(name);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += other[i];
      }
    }
    last_lr_ = adam_update(params_, total, adam_);
    step_ = next_step;
    return loss;
  }

  void evaluate_event(double wall) {
    MetricsRow row;
    row.step = step_;
    row.train_loss = loss_count_ ? loss_sum_ / static_cast<double>(loss_count_) : 0.0;
    row.eval_loss = mean_span_loss(*model_, params_, eval_set_, embeddings_, config_.max_seq_len);
    if (hooks_.eval_loss_override) row.eval_loss = hooks_.eval_loss_override(events_done_, row.eval_loss);
    const auto preds = predict(*model_, params_, eval_set_, embeddings_, config_.max_seq_len,
                               config_.max_answer_len);
    const auto rep = report(preds, golds_, 0.0);
    row.eval_em = rep.overall.em;
    row.eval_f1 = rep.overall.f1;
    row.learning_rate = last_lr_;
    row.wall_seconds = wall;
    metrics_.push_back(row);
    loss_sum_ = 0.0;
    loss_count_ = 0;
    ++events_done_;

    if (stopper_.observe(row.eval_loss)) {
      save_checkpoint(config_.out_dir / "best.ckpt", params_.params(), config_.head.digest());
    }
    if (stopper_.should_stop()) result_.early_stopped = true;
    save_state();

    if (!config_.quiet) {
      std::cerr << "step " << row.step << "/" << plan_.train_steps << " train_loss "
                << fmt(row.train_loss) << " eval_loss " << fmt(row.eval_loss) << " eval_em "
                << fmt(row.eval_em) << " eval_f1 " << fmt(row.eval_f1) << " lr "
                << fmt(row.learning_rate) << (result_.early_stopped ? " (early stop)" : "")
                << "\n";
    }
  }

  std::string run_config_json() const {
    json j;
    j["head"] = head_to_json(config_.head);
    j["head_digest"] = config_.head.digest();
    j["squad_path"] = config_.squad_path;
    j["eval_squad_path"] = config_.eval_squad_path;
    j["embeddings"] = config_.embeddings;
    j["split_fraction"] = config_.split_fraction;
    j["seed"] = config_.seed;
    j["epochs"] = config_.epochs;
    j["batch_size"] = config_.batch_size;
    j["max_seq_len"] = config_.max_seq_len;
    j["max_answer_len"] = config_.max_answer_len;
    j["learning_rate"] = config_.optimizer.learning_rate;
    j["warmup_fraction"] = config_.optimizer.warmup_fraction;
    j["weight_decay"] = config_.optimizer.weight_decay;
    j["patience"] = config_.patience;
    j["train_steps"] = plan_.train_steps;
    j["eval_events"] = plan_.eval_events;
    return j.dump(2) + "\n";
  }

  void save_state() {
    const auto digest = config_.head.digest();
    save_checkpoint(config_.out_dir / "last.ckpt", params_.params(), digest);
    ParamStore<float>::Map moments;
    for (const auto& [name, m] : adam_.first_moment) moments.emplace("m/" + name, m);
    for (const auto& [name, v] : adam_.second_moment) moments.emplace("v/" + name, v);
    save_checkpoint(config_.out_dir / "optimizer.ckpt", moments, digest);

    json j;
    j["step"] = step_;
    j["head_digest"] = digest;
    j["best_eval_loss"] = std::isfinite(stopper_.best()) ? json(stopper_.best()) : json(nullptr);
    j["bad_events"] = stopper_.bad_events();
    j["events_done"] = events_done_;
    j["loss_sum"] = loss_sum_;
    j["loss_count"] = loss_count_;
    j["last_lr"] = last_lr_;
    j["early_stopped"] = result_.early_stopped;
    j["metrics"] = json::array();
    for (const auto& r : metrics_) j["metrics"].push_back(row_to_json(r));
    write_file_atomic(config_.out_dir / "trainer_state.json", j.dump(2) + "\n");
    write_file_atomic(config_.out_dir / "metrics.csv", metrics_csv(metrics_));
    write_file_atomic(config_.out_dir / "timing.csv", timing_csv(metrics_));
  }

  void restore() {
    const auto state_path = config_.out_dir / "trainer_state.json";
    json j;
    try {
      j = json::parse(read_file(state_path));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kParse, state_path.string() + ": " + e.what());
    }
    if (j.at("head_digest").get<std::uint64_t>() != config_.head.digest()) {
      throw Error(ErrorKind::kMismatch, "cannot resume: head config differs from the saved run");
    }
    step_ = j.at("step").get<std::size_t>();
    stopper_.restore(j.at("best_eval_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                      : j.at("best_eval_loss").get<double>(),
                     j.at("bad_events").get<std::size_t>());
    events_done_ = j.at("events_done").get<std::size_t>();
    loss_sum_ = j.at("loss_sum").get<double>();
    loss_count_ = j.at("loss_count").get<std::size_t>();
    last_lr_ = j.at("last_lr").get<double>();
    result_.early_stopped = j.at("early_stopped").get<bool>();
    metrics_.clear();
    for (const auto& r : j.at("metrics")) metrics_.push_back(row_from_json(r));
    if (!metrics_.empty()) wall_offset_ = metrics_.back().wall_seconds;

    params_ = load_checkpoint_for(config_.out_dir / "last.ckpt", config_.head);
    const Checkpoint moments = load_checkpoint(config_.out_dir / "optimizer.ckpt");
    for (auto& [name, m] : adam_.first_moment) m = moments.params.param("m/" + name);
    for (auto& [name, v] : adam_.second_moment) v = moments.params.param("v/" + name);
    adam_.step = step_;
  }

  const RunConfig& config_;
  const std::vector<SquadExample>& eval_set_;
  std::vector<GoldAnswer> golds_;
  const EmbeddingSource& embeddings_;
  const TrainHooks& hooks_;

  std::vector<Feature> train_features_;
  StepPlan plan_;
  std::unique_ptr<HeadModel<float>> model_;
  ParamStore<float> params_;
  AdamState adam_;
  std::size_t threads_ = 1;
  std::vector<ParamStore<float>::Map> worker_grads_;

  EarlyStopper stopper_;
  std::size_t step_ = 0;
  std::size_t events_done_ = 0;
  double loss_sum_ = 0.0;
  std::size_t loss_count_ = 0;
  double last_lr_ = 0.0;
  double wall_offset_ = 0.0;
  std::vector<MetricsRow> metrics_;
  TrainResult result_;
};

}  // namespace

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "step,train_loss,eval_loss,eval_em,eval_f1,learning_rate\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + fmt(r.train_loss) + "," + fmt(r.eval_loss) + "," +
           fmt(r.eval_em) + "," + fmt(r.eval_f1) + "," + fmt(r.learning_rate) + "\n";
  }
  return out;
}

std::string timing_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "step,wall_seconds\n";
  for (const auto& r : rows) out += std::to_string(r.step) + "," + fmt(r.wall_seconds) + "\n";
  return out;
}

void RunConfig::validate() const {
  head.validate();
  if (epochs < 1) throw Error(ErrorKind::kConfig, "epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorKind::kConfig, "batch_size must be >= 1");
  if (max_seq_len < 4) throw Error(ErrorKind::kConfig, "max_seq_len must be >= 4");
  if (max_answer_len < 1) throw Error(ErrorKind::kConfig, "max_answer_len must be >= 1");
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
    throw Error(ErrorKind::kConfig, "split fraction must be in (0, 1)");
  }
  std::vector<const std::string*> paths{&squad_path, &eval_squad_path};
  if (embeddings.rfind("synthetic:", 0) != 0) paths.push_back(&embeddings);
  for (const auto* p : paths) {
    if (!p->empty() && !fs::is_regular_file(*p)) {
      throw Error(ErrorKind::kIo, "cannot read '" + *p + "'");
    }
  }
}

SavedRun load_saved_run(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
    SavedRun run;
    const auto& h = j.at("head");
    run.head.variant = parse_head_variant(h.at("variant").get<std::string>());
    run.head.hidden_size = h.at("hidden_size").get<std::size_t>();
    run.head.kernel_widths = h.at("kernel_widths").get<std::vector<std::size_t>>();
    run.head.filters_per_kernel = h.at("filters_per_kernel").get<std::size_t>();
    run.head.lstm_hidden = h.at("lstm_hidden").get<std::size_t>();
    run.head.context_channels = h.at("context_channels").get<std::size_t>();
    run.head.generator_width = h.at("generator_width").get<std::size_t>();
    run.head.applied_width = h.at("applied_width").get<std::size_t>();
    run.head.dropout_keep_prob = h.at("dropout_keep_prob").get<double>();
    run.head.validate();
    run.embeddings = j.at("embeddings").get<std::string>();
    run.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    run.max_answer_len = j.at("max_answer_len").get<std::size_t>();
    return run;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, path.string() + ": " + e.what());
  }
}

TrainResult train(const RunConfig& config, const std::vector<SquadExample>& train_set,
                  const std::vector<SquadExample>& eval_set, const EmbeddingSource& embeddings,
                  const TrainHooks& hooks) {
  config.head.validate();
  Trainer trainer(config, train_set, eval_set, embeddings, hooks);
  return trainer.run();
}

Split load_train_eval(const RunConfig& config) {
  if (config.squad_path.empty()) throw Error(ErrorKind::kConfig, "no --squad file given");
  auto examples = load_squad_file(config.squad_path);
  if (config.eval_squad_path.empty()) {
    return split_train_eval(examples, config.split_fraction, config.seed);
  }
  Split split;
  split.train = std::move(examples);
  split.eval = load_squad_file(config.eval_squad_path);
  return split;
}

TrainResult train(const RunConfig& config, const TrainHooks& hooks) {
  config.validate();
  const auto source = make_embedding_source(config.embeddings);
  const auto split = load_train_eval(config);
  return train(config, split.train, split.eval, *source, hooks);
}

double mean_span_loss(const HeadModel<float>& model, const ParamStore<float>& params,
                      const std::vector<SquadExample>& examples,
                      const EmbeddingSource& embeddings, std::size_t max_seq_len) {
  const auto prepared = prepare(examples, max_seq_len, FeaturizeMode::kEvaluation);
  if (prepared.features.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& f : prepared.features) sum += feature_loss(model, params, f, embeddings);
  return sum / static_cast<double>(prepared.features.size());
}

std::vector<Prediction> predict(const HeadModel<float>& model, const ParamStore<float>& params,
                                const std::vector<SquadExample>& examples,
                                const EmbeddingSource& embeddings, std::size_t max_seq_len,
                                std::size_t max_answer_len) {
  std::vector<Prediction> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    std::optional<Feature> f;
    try {
      f = featurize(ex, max_seq_len, FeaturizeMode::kEvaluation);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kRange) throw;
    }
    if (!f) {
      Prediction p;
      p.qid = ex.qid;
      p.score_diff = std::numeric_limits<double>::infinity();
      out.push_back(std::move(p));
      continue;
    }
    const auto seq = embeddings.embed(*f);
    const auto logits = model.forward(params, seq.embeddings, f->valid_len);
    out.push_back(extract_best_span(logits, *f, max_answer_len));
  }
  return out;
}

void write_prediction_files(const fs::path& out_dir, const std::vector<Prediction>& predictions) {
  fs::create_directories(out_dir);
  write_file_atomic(out_dir / "predictions.json", predictions_to_json(predictions));
  write_file_atomic(out_dir / "null_odds.json", null_odds_to_json(predictions));
}

Evaluation evaluate(const std::vector<Prediction>& predictions,
                    const std::vector<GoldAnswer>& golds) {
  std::set<std::string> gold_ids, pred_ids;
  for (const auto& g : golds) gold_ids.insert(g.qid);
  for (const auto& p : predictions) pred_ids.insert(p.qid);
  std::vector<std::string> missing, extra;
  std::set_difference(gold_ids.begin(), gold_ids.end(), pred_ids.begin(), pred_ids.end(),
                      std::back_inserter(missing));
  std::set_difference(pred_ids.begin(), pred_ids.end(), gold_ids.begin(), gold_ids.end(),
                      std::back_inserter(extra));
  if (!missing.empty() || !extra.empty()) {
    std::ostringstream os;
    os << "qid mismatch: " << missing.size() << " without prediction, " << extra.size()
       << " not in the dataset;";
    std::size_t shown = 0;
    for (const auto& q : missing) {
      if (shown++ < 20) os << " missing:" << q;
    }
    for (const auto& q : extra) {
      if (shown++ < 40) os << " unknown:" << q;
    }
    throw Error(ErrorKind::kMismatch, os.str());
  }
  Evaluation ev;
  ev.before_threshold = report(predictions, golds, 0.0);
  if (predictions.empty()) {
    ev.after_threshold = ev.before_threshold;
    return ev;
  }
  const auto choice = sweep_null_threshold(predictions, golds);
  ev.after_threshold = report(predictions, golds, choice.tau);
  return ev;
}

std::string evaluation_to_json(const Evaluation& evaluation) {
  json j = json::parse(report_to_json(evaluation.after_threshold));
  j["before_threshold"] = json::parse(report_to_json(evaluation.before_threshold));
  j["before_threshold"].erase("threshold");
  return j.dump(2) + "\n";
}

}  // namespace spanqa

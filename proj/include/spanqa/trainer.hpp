#pragma once

// Training, prediction and evaluation drivers behind the CLI.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "spanqa/embeddings.hpp"
#include "spanqa/evaluator.hpp"
#include "spanqa/heads.hpp"
#include "spanqa/loss_opt.hpp"
#include "spanqa/squad.hpp"

namespace spanqa {

struct StepPlan {
  std::size_t train_steps = 0;
  std::size_t eval_events = 0;
  std::size_t eval_interval = 0;  // steps between evaluations
};

// train_steps = floor(n_samples * n_epochs / batch_size)
// eval_events = max(1, floor(train_steps / 1000))
// eval_interval = floor(train_steps / eval_events)
StepPlan compute_steps(std::size_t n_samples, std::size_t n_epochs, std::size_t batch_size);

// Stops once eval loss has failed to improve on its running minimum for
// `patience` consecutive events.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  // Returns true when `eval_loss` is a new minimum.
  bool observe(double eval_loss);
  bool should_stop() const { return patience_ > 0 && bad_events_ >= patience_; }

  double best() const { return best_; }
  std::size_t bad_events() const { return bad_events_; }
  void restore(double best, std::size_t bad_events) {
    best_ = best;
    bad_events_ = bad_events;
  }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_events_ = 0;
};

struct MetricsRow {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean since the previous row
  double eval_loss = 0.0;
  double eval_em = 0.0;
  double eval_f1 = 0.0;
  double learning_rate = 0.0;
  double wall_seconds = 0.0;
};

// metrics.csv carries every field except wall_seconds, which goes to
// timing.csv so that metrics.csv is reproducible byte for byte.
std::string metrics_csv(const std::vector<MetricsRow>& rows);
std::string timing_csv(const std::vector<MetricsRow>& rows);

struct RunConfig {
  HeadConfig head;
  std::string squad_path;
  std::string eval_squad_path;  // when set, used as-is instead of splitting
  std::string embeddings = "synthetic:64,0";
  double split_fraction = 0.10;
  std::uint64_t seed = 0;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::size_t max_seq_len = 384;
  std::size_t max_answer_len = 30;
  AdamConfig optimizer;
  std::size_t patience = 3;
  std::filesystem::path out_dir = "run";
  bool single_thread = false;
  std::size_t threads = 0;  // 0: hardware concurrency
  bool resume = false;
  bool quiet = false;

  void validate() const;
};

struct TrainHooks {
  // Replaces the measured eval loss at each event (event index, measured).
  std::function<double(std::size_t, double)> eval_loss_override;
  // Saves full state and returns after this many steps.
  std::optional<std::size_t> stop_after_steps;
};

struct TrainResult {
  StepPlan plan;
  std::size_t steps_run = 0;
  bool early_stopped = false;
  std::vector<MetricsRow> metrics;
  double best_eval_loss = 0.0;
  ParamStore<float> params;
  std::size_t train_features = 0;
  std::size_t skipped_examples = 0;
};

// run_config.json written next to the checkpoints of every run.
struct SavedRun {
  HeadConfig head;
  std::string embeddings;
  std::size_t max_seq_len = 384;
  std::size_t max_answer_len = 30;
};
SavedRun load_saved_run(const std::filesystem::path& run_config_json);

// Trains on `train_set`, evaluating on `eval_set`. Writes metrics.csv,
// timing.csv, last.ckpt, best.ckpt, optimizer.ckpt and trainer_state.json
// into config.out_dir.
TrainResult train(const RunConfig& config, const std::vector<SquadExample>& train_set,
                  const std::vector<SquadExample>& eval_set, const EmbeddingSource& embeddings,
                  const TrainHooks& hooks = {});

// Training and held-out sets: config.eval_squad_path when given, otherwise
// an article-level split of config.squad_path.
Split load_train_eval(const RunConfig& config);

// Loads the SQuAD file(s) and embedding source named by `config`.
TrainResult train(const RunConfig& config, const TrainHooks& hooks = {});

// Mean span loss over featurizable examples (no dropout).
double mean_span_loss(const HeadModel<float>& model, const ParamStore<float>& params,
                      const std::vector<SquadExample>& examples,
                      const EmbeddingSource& embeddings, std::size_t max_seq_len);

// One prediction per example. Examples whose question does not fit get an
// empty span with score_diff = +inf.
std::vector<Prediction> predict(const HeadModel<float>& model, const ParamStore<float>& params,
                                const std::vector<SquadExample>& examples,
                                const EmbeddingSource& embeddings, std::size_t max_seq_len,
                                std::size_t max_answer_len);

// Writes predictions.json and null_odds.json into `out_dir`.
void write_prediction_files(const std::filesystem::path& out_dir,
                            const std::vector<Prediction>& predictions);

struct Evaluation {
  EvalReport before_threshold;  // tau = 0
  EvalReport after_threshold;   // swept tau
};

// Gold qids and prediction qids must match exactly (mismatches listed).
Evaluation evaluate(const std::vector<Prediction>& predictions,
                    const std::vector<GoldAnswer>& golds);

std::string evaluation_to_json(const Evaluation& evaluation);

}  // namespace spanqa

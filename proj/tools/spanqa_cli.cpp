// spanqa: train, predict and evaluate span-prediction heads.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "spanqa/binary_io.hpp"
#include "spanqa/checkpoint.hpp"
#include "spanqa/error.hpp"
#include "spanqa/evaluator.hpp"
#include "spanqa/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace spanqa;

namespace {

struct HeadFlags {
  std::string head = "ctx-cnn";
  std::size_t hidden = 0;  // 0: take from the embedding source
  std::vector<std::size_t> widths{3, 5, 7};
  std::size_t filters = 64;
  std::size_t lstm_hidden = 256;
  std::size_t channels = 16;
  std::size_t generator_width = 5;
  std::size_t applied_width = 5;
  double keep_prob = 0.9;
  std::vector<CLI::Option*> options;

  void add(CLI::App* app) {
    options = {
        app->add_option("--head", head, "Output network")
            ->check(CLI::IsMember({"fc", "cnn", "ctx-cnn", "lstm"}))
            ->capture_default_str(),
        app->add_option("--hidden-size", hidden,
                        "Embedding width H (default: width of the embedding source)"),
        app->add_option("--kernel-widths", widths, "cnn kernel widths")
            ->delimiter(',')
            ->capture_default_str(),
        app->add_option("--filters", filters, "cnn filters per kernel width")
            ->capture_default_str(),
        app->add_option("--lstm-hidden", lstm_hidden, "lstm state size")->capture_default_str(),
        app->add_option("--context-channels", channels, "ctx-cnn generated filters")
            ->capture_default_str(),
        app->add_option("--generator-width", generator_width, "ctx-cnn generator kernel width")
            ->capture_default_str(),
        app->add_option("--applied-width", applied_width, "ctx-cnn generated filter width")
            ->capture_default_str(),
        app->add_option("--keep-prob", keep_prob, "Dropout keep probability (1 disables)")
            ->capture_default_str(),
    };
  }

  bool any_given() const {
    return std::any_of(options.begin(), options.end(), [](auto* o) { return o->count() > 0; });
  }

  HeadConfig config(std::size_t source_hidden) const {
    HeadConfig c;
    c.variant = parse_head_variant(head);
    c.hidden_size = hidden ? hidden : source_hidden;
    c.kernel_widths = widths;
    c.filters_per_kernel = filters;
    c.lstm_hidden = lstm_hidden;
    c.context_channels = channels;
    c.generator_width = generator_width;
    c.applied_width = applied_width;
    c.dropout_keep_prob = keep_prob;
    return c;
  }
};

// Every long option of `app` also reads SPANQA_<NAME> from the environment.
void attach_env(CLI::App* app) {
  for (CLI::Option* opt : app->get_options([](CLI::Option*) { return true; })) {
    const auto& names = opt->get_lnames();
    if (names.empty() || names.front() == "help") continue;
    std::string env = "SPANQA_";
    for (char ch : names.front()) {
      env += ch == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    }
    opt->envname(env);
  }
}

int fail(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Span-prediction heads over frozen token embeddings"};
  app.require_subcommand(1);

  // train
  RunConfig run;
  HeadFlags train_head;
  double lr = run.optimizer.learning_rate;
  auto* train_cmd = app.add_subcommand("train", "Train a head and write checkpoints and metrics");
  train_head.add(train_cmd);
  train_cmd->add_option("--squad", run.squad_path, "SQuAD 2.0 training JSON")->required();
  train_cmd->add_option("--eval-squad", run.eval_squad_path,
                        "Held-out SQuAD JSON (default: article split of --squad)");
  train_cmd->add_option("--embeddings", run.embeddings, "BEMB file or synthetic:H,seed")
      ->capture_default_str();
  train_cmd->add_option("--split", run.split_fraction, "Held-out fraction of articles")
      ->capture_default_str();
  train_cmd->add_option("--epochs", run.epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", run.batch_size)->capture_default_str();
  train_cmd->add_option("--max-seq-len", run.max_seq_len)->capture_default_str();
  train_cmd->add_option("--max-answer-len", run.max_answer_len)->capture_default_str();
  train_cmd->add_option("--lr", lr, "Peak learning rate")->capture_default_str();
  train_cmd->add_option("--warmup", run.optimizer.warmup_fraction, "Warmup fraction of steps")
      ->capture_default_str();
  train_cmd->add_option("--weight-decay", run.optimizer.weight_decay)->capture_default_str();
  train_cmd->add_option("--clip-norm", run.optimizer.clip_norm, "Global norm clip (0: off)")
      ->capture_default_str();
  train_cmd->add_option("--seed", run.seed)->capture_default_str();
  train_cmd->add_option("--out", run.out_dir, "Run directory")->capture_default_str();
  train_cmd->add_option("--patience", run.patience, "Early-stop patience (0: off)")
      ->capture_default_str();
  train_cmd->add_option("--threads", run.threads, "Worker threads (0: all cores)")
      ->capture_default_str();
  train_cmd->add_flag("--single-thread", run.single_thread, "Bit-reproducible single thread");
  train_cmd->add_flag("--resume", run.resume, "Continue the run saved in --out");
  train_cmd->add_flag("--quiet", run.quiet, "No progress lines");
  attach_env(train_cmd);

  // predict
  HeadFlags predict_head;
  std::string checkpoint, predict_squad, run_config_path, predict_embeddings;
  std::size_t predict_seq_len = 0, predict_answer_len = 0;
  fs::path predict_out = "predictions";
  auto* predict_cmd =
      app.add_subcommand("predict", "Write predictions.json and null_odds.json for a dataset");
  predict_head.add(predict_cmd);
  predict_cmd->add_option("--checkpoint", checkpoint, "SHLB checkpoint")->required();
  predict_cmd->add_option("--squad", predict_squad, "SQuAD 2.0 JSON")->required();
  predict_cmd->add_option("--config", run_config_path,
                          "run_config.json (default: next to the checkpoint)");
  predict_cmd->add_option("--embeddings", predict_embeddings, "BEMB file or synthetic:H,seed");
  predict_cmd->add_option("--max-seq-len", predict_seq_len);
  predict_cmd->add_option("--max-answer-len", predict_answer_len);
  predict_cmd->add_option("--out", predict_out, "Output directory")->capture_default_str();
  attach_env(predict_cmd);

  // evaluate
  std::string eval_squad, predictions_path, null_odds_path, report_path;
  bool as_json = false;
  auto* eval_cmd = app.add_subcommand(
      "evaluate", "Score predictions, sweep the null threshold and print the report");
  eval_cmd->add_option("--squad", eval_squad, "SQuAD 2.0 JSON with gold answers")->required();
  eval_cmd->add_option("--predictions", predictions_path)->required();
  eval_cmd->add_option("--null-odds", null_odds_path)->required();
  eval_cmd->add_option("--report", report_path, "Also write the JSON report here");
  eval_cmd->add_flag("--json", as_json, "Print JSON instead of text");
  attach_env(eval_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    if (*train_cmd) {
      run.optimizer.learning_rate = lr;
      run.head.hidden_size = 8;  // placeholder so validate() can check the other fields
      run.validate();
      const auto source = make_embedding_source(run.embeddings);
      run.head = train_head.config(source->hidden());
      run.validate();
      const auto split = load_train_eval(run);
      const auto result = train(run, split.train, split.eval, *source);
      json summary{{"out", run.out_dir.string()},
                   {"train_examples", split.train.size()},
                   {"eval_examples", split.eval.size()},
                   {"train_features", result.train_features},
                   {"skipped_examples", result.skipped_examples},
                   {"train_steps", result.plan.train_steps},
                   {"eval_events", result.plan.eval_events},
                   {"steps_run", result.steps_run},
                   {"early_stopped", result.early_stopped},
                   {"best_eval_loss", result.best_eval_loss}};
      if (!result.metrics.empty()) {
        const auto& last = result.metrics.back();
        summary["final"] = {{"step", last.step},
                            {"train_loss", last.train_loss},
                            {"eval_loss", last.eval_loss},
                            {"eval_em", last.eval_em},
                            {"eval_f1", last.eval_f1}};
      }
      std::cout << summary.dump(2) << "\n";
    } else if (*predict_cmd) {
      fs::path config_file = run_config_path;
      if (config_file.empty()) {
        const auto sibling = fs::path(checkpoint).parent_path() / "run_config.json";
        if (fs::exists(sibling)) config_file = sibling;
      }
      SavedRun saved;
      bool have_saved = false;
      if (!config_file.empty() && !predict_head.any_given()) {
        saved = load_saved_run(config_file);
        have_saved = true;
      }
      if (!predict_embeddings.empty()) saved.embeddings = predict_embeddings;
      if (saved.embeddings.empty()) {
        throw Error(ErrorKind::kConfig, "no --embeddings given and no run_config.json found");
      }
      if (predict_seq_len) saved.max_seq_len = predict_seq_len;
      if (predict_answer_len) saved.max_answer_len = predict_answer_len;
      const auto source = make_embedding_source(saved.embeddings);
      const HeadConfig head = have_saved ? saved.head : predict_head.config(source->hidden());
      head.validate();
      auto model = make_head<float>(head);
      const auto params = load_checkpoint_for(checkpoint, head);
      const auto examples = load_squad_file(predict_squad);
      const auto preds =
          predict(*model, params, examples, *source, saved.max_seq_len, saved.max_answer_len);
      write_prediction_files(predict_out, preds);
      std::cout << json{{"out", predict_out.string()}, {"predictions", preds.size()}}.dump()
                << "\n";
    } else if (*eval_cmd) {
      const auto golds = golds_from_examples(load_squad_file(eval_squad));
      const auto preds =
          predictions_from_json(read_file(predictions_path), read_file(null_odds_path));
      const auto evaluation = evaluate(preds, golds);
      const auto doc = evaluation_to_json(evaluation);
      if (!report_path.empty()) write_file_atomic(report_path, doc);
      if (as_json) {
        std::cout << doc;
      } else {
        std::cout << "before threshold sweep\n"
                  << format_report(evaluation.before_threshold) << "after threshold sweep\n"
                  << format_report(evaluation.after_threshold);
      }
    }
  } catch (const Error& e) {
    return fail(std::string(error_kind_name(e.kind())), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}

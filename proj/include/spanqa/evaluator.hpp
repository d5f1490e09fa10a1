#pragma once

// Span extraction and SQuAD 2.0-style scoring with a tunable null threshold.

#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "spanqa/heads.hpp"
#include "spanqa/squad.hpp"

namespace spanqa {

// Lowercase, strip ASCII punctuation, drop whole-word "a"/"an"/"the",
// collapse whitespace.
std::string normalize_answer(std::string_view text);

// Empty `golds` means the question is unanswerable: the prediction must be
// empty to score.
int em_score(std::string_view prediction, const std::vector<std::string>& golds);
double f1_score(std::string_view prediction, const std::vector<std::string>& golds);

inline constexpr double kNoSpan = -std::numeric_limits<double>::infinity();

struct Prediction {
  std::string qid;
  std::string span_text;       // best non-null span ("" if there is none)
  std::size_t start = 0;       // token positions of the best span, 0 if none
  std::size_t end = 0;
  double best_nonnull_score = kNoSpan;
  double null_score = 0.0;
  double score_diff = 0.0;     // null_score - best_nonnull_score (+inf if no span)
  std::string text;            // decision at threshold 0

  // Null iff score_diff > tau.
  std::string decide(double tau) const { return score_diff > tau ? std::string() : span_text; }
};

// Best (i, j) over context positions with i <= j < i + max_answer_len,
// maximizing start[i] + end[j]; ties go to smaller i, then smaller j.
template <typename T>
Prediction extract_best_span(const SpanLogits<T>& logits, const Feature& feature,
                             std::size_t max_answer_len = 30);

struct GoldAnswer {
  std::string qid;
  std::vector<std::string> texts;  // empty when unanswerable
  bool is_impossible() const { return texts.empty(); }
};

GoldAnswer gold_from_example(const SquadExample& example);
std::vector<GoldAnswer> golds_from_examples(const std::vector<SquadExample>& examples);

struct ThresholdChoice {
  double tau = 0.0;
  double f1 = 0.0;  // overall F1 percentage at tau
};

// Sweeps tau over {-inf} and every finite observed score_diff; returns the
// tau with the highest overall F1 (ties to the smaller tau).
ThresholdChoice sweep_null_threshold(const std::vector<Prediction>& predictions,
                                     const std::vector<GoldAnswer>& golds);

struct SliceMetrics {
  double em = 0.0;  // percentages
  double f1 = 0.0;
  std::size_t count = 0;
};

struct EvalReport {
  SliceMetrics overall;
  SliceMetrics noans;
  SliceMetrics hasans;
  double threshold = 0.0;
};

// Applies the tau decision to every prediction and scores each slice.
// Throws ErrorKind::kMismatch listing gold qids with no prediction.
EvalReport report(const std::vector<Prediction>& predictions,
                  const std::vector<GoldAnswer>& golds, double tau);

std::string format_report(const EvalReport& report);
std::string report_to_json(const EvalReport& report);

// predictions JSON: qid -> best non-null answer text.
// null-odds JSON: qid -> score_diff (null when there is no valid span).
std::string predictions_to_json(const std::vector<Prediction>& predictions);
std::string null_odds_to_json(const std::vector<Prediction>& predictions);

// Rebuilds predictions (qid, span_text, score_diff) from the two files.
// Throws ErrorKind::kMismatch listing qids present in only one of them.
std::vector<Prediction> predictions_from_json(std::string_view predictions_json,
                                              std::string_view null_odds_json);

}  // namespace spanqa

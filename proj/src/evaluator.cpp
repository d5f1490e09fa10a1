#include "spanqa/evaluator.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace spanqa {

using json = nlohmann::json;

namespace {

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::string> normalized_tokens(std::string_view text) {
  return split_ws(normalize_answer(text));
}

double f1_single(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.empty() || gold.empty()) return pred == gold ? 1.0 : 0.0;
  std::unordered_map<std::string, int> counts;
  for (const auto& t : gold) ++counts[t];
  int same = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++same;
    }
  }
  if (same == 0) return 0.0;
  const double precision = static_cast<double>(same) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(same) / static_cast<double>(gold.size());
  return 2.0 * precision * recall / (precision + recall);
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

std::string normalize_answer(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::ispunct(c)) continue;
    cleaned.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
  }
  std::string out;
  for (auto& tok : split_ws(cleaned)) {
    if (tok == "a" || tok == "an" || tok == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

int em_score(std::string_view prediction, const std::vector<std::string>& golds) {
  const std::string p = normalize_answer(prediction);
  if (golds.empty()) return p.empty() ? 1 : 0;
  for (const auto& g : golds) {
    if (normalize_answer(g) == p) return 1;
  }
  return 0;
}

double f1_score(std::string_view prediction, const std::vector<std::string>& golds) {
  const auto pred = normalized_tokens(prediction);
  if (golds.empty()) return pred.empty() ? 1.0 : 0.0;
  double best = 0.0;
  for (const auto& g : golds) best = std::max(best, f1_single(pred, normalized_tokens(g)));
  return best;
}

template <typename T>
Prediction extract_best_span(const SpanLogits<T>& logits, const Feature& feature,
                             std::size_t max_answer_len) {
  if (max_answer_len < 1) throw Error(ErrorKind::kConfig, "max_answer_len must be >= 1");
  if (logits.start.size() < feature.valid_len || logits.end.size() < feature.valid_len) {
    throw Error(ErrorKind::kShape, "span logits shorter than the feature's valid length");
  }
  Prediction p;
  p.qid = feature.qid;
  p.null_score = static_cast<double>(logits.start[0]) + static_cast<double>(logits.end[0]);

  const std::size_t first = feature.context_offset;
  const std::size_t stop = feature.context_offset + feature.context_tokens();
  bool found = false;
  for (std::size_t i = first; i < stop; ++i) {
    const std::size_t j_stop = std::min(stop, i + max_answer_len);
    for (std::size_t j = i; j < j_stop; ++j) {
      const double score = static_cast<double>(logits.start[i]) + static_cast<double>(logits.end[j]);
      if (!found || score > p.best_nonnull_score) {
        found = true;
        p.best_nonnull_score = score;
        p.start = i;
        p.end = j;
      }
    }
  }
  if (found) {
    p.span_text = feature.span_text(p.start, p.end);
    p.score_diff = p.null_score - p.best_nonnull_score;
  } else {
    p.score_diff = std::numeric_limits<double>::infinity();
  }
  p.text = p.decide(0.0);
  return p;
}

template Prediction extract_best_span(const SpanLogits<float>&, const Feature&, std::size_t);
template Prediction extract_best_span(const SpanLogits<double>&, const Feature&, std::size_t);

GoldAnswer gold_from_example(const SquadExample& example) {
  GoldAnswer g{example.qid, {}};
  if (!example.is_impossible) {
    for (const auto& a : example.answers) g.texts.push_back(a.text);
  }
  return g;
}

std::vector<GoldAnswer> golds_from_examples(const std::vector<SquadExample>& examples) {
  std::vector<GoldAnswer> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(gold_from_example(ex));
  return out;
}

namespace {

std::unordered_map<std::string, const GoldAnswer*> index_golds(const std::vector<GoldAnswer>& golds) {
  std::unordered_map<std::string, const GoldAnswer*> out;
  for (const auto& g : golds) out.emplace(g.qid, &g);
  return out;
}

}  // namespace

ThresholdChoice sweep_null_threshold(const std::vector<Prediction>& predictions,
                                     const std::vector<GoldAnswer>& golds) {
  if (predictions.empty()) throw Error(ErrorKind::kConfig, "cannot sweep an empty prediction set");
  const auto by_qid = index_golds(golds);

  struct Item {
    double diff;
    double if_null;
    double if_answered;
  };
  std::vector<Item> items;
  items.reserve(predictions.size());
  double total = 0.0;  // everything null at tau = -inf
  for (const auto& p : predictions) {
    auto it = by_qid.find(p.qid);
    if (it == by_qid.end()) {
      throw Error(ErrorKind::kMismatch, "prediction for unknown qid '" + p.qid + "'");
    }
    const GoldAnswer& g = *it->second;
    Item item{p.score_diff, f1_score("", g.texts), f1_score(p.span_text, g.texts)};
    total += item.if_null;
    items.push_back(item);
  }
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.diff < b.diff; });

  ThresholdChoice best{-std::numeric_limits<double>::infinity(), total};
  std::size_t k = 0;
  while (k < items.size() && std::isfinite(items[k].diff)) {
    const double tau = items[k].diff;
    while (k < items.size() && items[k].diff == tau) {
      total += items[k].if_answered - items[k].if_null;
      ++k;
    }
    if (total > best.f1 + 1e-9) best = {tau, total};
  }
  best.f1 = 100.0 * best.f1 / static_cast<double>(predictions.size());
  return best;
}

EvalReport report(const std::vector<Prediction>& predictions,
                  const std::vector<GoldAnswer>& golds, double tau) {
  std::unordered_map<std::string, const Prediction*> by_qid;
  for (const auto& p : predictions) by_qid.emplace(p.qid, &p);

  std::vector<std::string> missing;
  double em[2] = {0, 0}, f1[2] = {0, 0};
  std::size_t n[2] = {0, 0};
  for (const auto& g : golds) {
    auto it = by_qid.find(g.qid);
    if (it == by_qid.end()) {
      missing.push_back(g.qid);
      continue;
    }
    const std::string text = it->second->decide(tau);
    const int slice = g.is_impossible() ? 0 : 1;
    em[slice] += em_score(text, g.texts);
    f1[slice] += f1_score(text, g.texts);
    ++n[slice];
  }
  if (!missing.empty()) {
    std::string msg = "no prediction for " + std::to_string(missing.size()) + " qid(s):";
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
    if (missing.size() > 20) msg += " ...";
    throw Error(ErrorKind::kMismatch, msg);
  }
  auto pct = [](double sum, std::size_t count) {
    return count == 0 ? 0.0 : 100.0 * sum / static_cast<double>(count);
  };
  EvalReport r;
  r.threshold = tau;
  r.noans = {pct(em[0], n[0]), pct(f1[0], n[0]), n[0]};
  r.hasans = {pct(em[1], n[1]), pct(f1[1], n[1]), n[1]};
  r.overall = {pct(em[0] + em[1], n[0] + n[1]), pct(f1[0] + f1[1], n[0] + n[1]), n[0] + n[1]};
  return r;
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os << "threshold " << (std::isfinite(r.threshold) ? fixed2(r.threshold) : std::string("-inf"))
     << "\n";
  os << "overall  EM " << fixed2(r.overall.em) << "  F1 " << fixed2(r.overall.f1) << "  (n="
     << r.overall.count << ")\n";
  os << "noans    EM " << fixed2(r.noans.em) << "  F1 " << fixed2(r.noans.f1) << "  (n="
     << r.noans.count << ")\n";
  os << "hasans   EM " << fixed2(r.hasans.em) << "  F1 " << fixed2(r.hasans.f1) << "  (n="
     << r.hasans.count << ")\n";
  return os.str();
}

std::string report_to_json(const EvalReport& r) {
  json j;
  j["overall_em"] = r.overall.em;
  j["overall_f1"] = r.overall.f1;
  j["noans_em"] = r.noans.em;
  j["noans_f1"] = r.noans.f1;
  j["hasans_em"] = r.hasans.em;
  j["hasans_f1"] = r.hasans.f1;
  j["overall_count"] = r.overall.count;
  j["noans_count"] = r.noans.count;
  j["hasans_count"] = r.hasans.count;
  if (std::isfinite(r.threshold)) {
    j["threshold"] = r.threshold;
  } else {
    j["threshold"] = nullptr;  // -inf: every question predicted null
  }
  return j.dump(2) + "\n";
}

std::string predictions_to_json(const std::vector<Prediction>& predictions) {
  json j = json::object();
  for (const auto& p : predictions) j[p.qid] = p.span_text;
  return j.dump(2) + "\n";
}

std::string null_odds_to_json(const std::vector<Prediction>& predictions) {
  json j = json::object();
  for (const auto& p : predictions) {
    if (std::isfinite(p.score_diff)) {
      j[p.qid] = p.score_diff;
    } else {
      j[p.qid] = nullptr;
    }
  }
  return j.dump(2) + "\n";
}

std::vector<Prediction> predictions_from_json(std::string_view predictions_json,
                                              std::string_view null_odds_json) {
  json preds, odds;
  try {
    preds = json::parse(predictions_json);
    odds = json::parse(null_odds_json);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kParse, std::string("malformed predictions/null-odds JSON: ") + e.what());
  }
  if (!preds.is_object() || !odds.is_object()) {
    throw Error(ErrorKind::kParse, "predictions and null-odds files must be JSON objects");
  }
  std::vector<std::string> only_preds, only_odds;
  for (auto it = preds.begin(); it != preds.end(); ++it) {
    if (!odds.contains(it.key())) only_preds.push_back(it.key());
  }
  for (auto it = odds.begin(); it != odds.end(); ++it) {
    if (!preds.contains(it.key())) only_odds.push_back(it.key());
  }
  if (!only_preds.empty() || !only_odds.empty()) {
    std::string msg = "qid mismatch between predictions and null odds;";
    for (const auto& q : only_preds) msg += " predictions-only:" + q;
    for (const auto& q : only_odds) msg += " null-odds-only:" + q;
    throw Error(ErrorKind::kMismatch, msg);
  }
  std::vector<Prediction> out;
  for (auto it = preds.begin(); it != preds.end(); ++it) {
    if (!it.value().is_string()) {
      throw Error(ErrorKind::kParse, "prediction for '" + it.key() + "' is not a string");
    }
    const json& d = odds[it.key()];
    Prediction p;
    p.qid = it.key();
    p.span_text = it.value().get<std::string>();
    if (d.is_null()) {
      p.score_diff = std::numeric_limits<double>::infinity();
    } else if (d.is_number()) {
      p.score_diff = d.get<double>();
    } else {
      throw Error(ErrorKind::kParse, "null odds for '" + it.key() + "' is not a number");
    }
    p.text = p.decide(0.0);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace spanqa

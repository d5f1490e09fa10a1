#include <doctest.h>

#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>

#include "spanqa/error.hpp"
#include "spanqa/evaluator.hpp"
#include "support.hpp"

using namespace spanqa;
using spanqa::testing::best_span_oracle;
using spanqa::testing::layout_feature;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

SpanLogits<double> logits_from(const std::vector<double>& s, const std::vector<double>& e) {
  return {Tensor<double>({s.size()}, s), Tensor<double>({e.size()}, e)};
}

Prediction pred(std::string qid, std::string text, double diff) {
  Prediction p;
  p.qid = std::move(qid);
  p.span_text = std::move(text);
  p.score_diff = diff;
  p.text = p.decide(0.0);
  return p;
}

std::string random_words(SplitMix64& rng, std::size_t max_words) {
  static const char* kPool[] = {"red", "blue", "the", "green", "a", "fox", "Dog", "cat!", "sun"};
  std::string s;
  const std::size_t n = rng.below(max_words + 1);
  for (std::size_t i = 0; i < n; ++i) s += std::string(i ? " " : "") + kPool[rng.below(9)];
  return s;
}

// Random prediction/gold fixture; diffs come from a coarse grid so ties occur.
void random_fixture(SplitMix64& rng, std::size_t n, std::vector<Prediction>& preds,
                    std::vector<GoldAnswer>& golds) {
  preds.clear();
  golds.clear();
  for (std::size_t k = 0; k < n; ++k) {
    GoldAnswer g{"q" + std::to_string(k), {}};
    if (rng.uniform() < 0.5) {
      g.texts.push_back(random_words(rng, 3));
      if (g.texts[0].empty()) g.texts[0] = "sun";
      if (rng.uniform() < 0.3) g.texts.push_back(random_words(rng, 2) + " moon");
    }
    const double u = rng.uniform();
    const double diff = u < 0.05 ? kInf : std::round(rng.uniform(-8, 8) * 2) / 2;
    std::string text = rng.uniform() < 0.4 && !g.texts.empty() ? g.texts[0] : random_words(rng, 3);
    if (diff == kInf) text.clear();
    preds.push_back(pred(g.qid, text, diff));
    golds.push_back(g);
  }
}

}  // namespace

TEST_CASE("answer normalization") {
  CHECK(normalize_answer("The  Beatles!") == "beatles");
  CHECK(normalize_answer("a an the") == "");
  CHECK(normalize_answer("  Theatre, ANd\tthe   band ") == "theatre and band");
  CHECK(normalize_answer("") == "");

  SplitMix64 rng(3);
  const std::string alphabet = "aAnNtThHeE .,!?'-\t";
  for (int t = 0; t < 500; ++t) {
    std::string s;
    const std::size_t n = rng.below(30);
    for (std::size_t i = 0; i < n; ++i) s += alphabet[rng.below(alphabet.size())];
    const auto once = normalize_answer(s);
    CHECK(normalize_answer(once) == once);
  }
}

TEST_CASE("exact match") {
  CHECK(em_score("the beatles", {"Beatles"}) == 1);
  CHECK(em_score("", {}) == 1);
  CHECK(em_score("anything", {}) == 0);
  CHECK(em_score("beatle", {"Beatles"}) == 0);
  CHECK(em_score("", {"x"}) == 0);
  CHECK(em_score("Paris", {"London", "paris."}) == 1);
}

TEST_CASE("token F1") {
  CHECK(f1_score("a b c", {"b c d"}) == doctest::Approx(0.8));  // "a" is an article
  CHECK(f1_score("x b c", {"b c d"}) == doctest::Approx(2.0 / 3.0));
  CHECK(f1_score("same words", {"Same words!"}) == 1.0);
  CHECK(f1_score("", {}) == 1.0);
  CHECK(f1_score("x", {}) == 0.0);
  CHECK(f1_score("", {"x"}) == 0.0);
  CHECK(f1_score("b b c", {"b c c", "zzz"}) == doctest::Approx(2.0 / 3.0));

  SplitMix64 rng(8);
  for (int t = 0; t < 500; ++t) {
    const auto x = random_words(rng, 5), y = random_words(rng, 5);
    if (normalize_answer(x).empty() || normalize_answer(y).empty()) continue;
    const double a = f1_score(x, {y}), b = f1_score(y, {x});
    CHECK(a == doctest::Approx(b).epsilon(1e-15));
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
    CHECK(em_score(x, {y}) <= a);
  }
}

TEST_CASE("best span from one-hot logits") {
  Feature f = layout_feature(2, 6, 12);  // context tokens at positions 4..9
  std::vector<double> s(12, 0.0), e(12, 0.0);
  s[5] = 10.0;
  e[7] = 10.0;
  s[0] = 1.0;
  e[0] = 2.0;
  auto p = extract_best_span(logits_from(s, e), f, 30);
  CHECK(p.start == 5);
  CHECK(p.end == 7);
  CHECK(p.span_text == "w1 w2 w3");
  CHECK(p.best_nonnull_score == 20.0);
  CHECK(p.null_score == 3.0);
  CHECK(p.score_diff == -17.0);
  CHECK(p.text == p.span_text);

  auto capped = extract_best_span(logits_from(s, e), f, 2);
  CHECK(capped.end - capped.start + 1 <= 2);

  // all equal: first valid (i, i)
  auto tie = extract_best_span(logits_from(std::vector<double>(12, 0.5), std::vector<double>(12, 0.5)), f);
  CHECK(tie.start == 4);
  CHECK(tie.end == 4);
}

TEST_CASE("best span when no span is admissible") {
  Feature f = layout_feature(5, 0, 10);
  f.qid = "empty";
  auto p = extract_best_span(logits_from(std::vector<double>(10, 1.0), std::vector<double>(10, 1.0)), f);
  CHECK(p.best_nonnull_score == kNoSpan);
  CHECK(p.score_diff == kInf);
  CHECK(p.span_text.empty());
  CHECK(p.text.empty());
  CHECK(p.decide(1e300).empty());
  CHECK_THROWS_AS(extract_best_span(logits_from({1, 2}, {1, 2}), layout_feature(1, 2, 6)), Error);
  CHECK_THROWS_AS(extract_best_span(logits_from(std::vector<double>(6, 0), std::vector<double>(6, 0)),
                                    layout_feature(1, 2, 6), 0),
                  Error);
}

TEST_CASE("best span matches brute-force enumeration") {
  SplitMix64 rng(2024);
  std::size_t agreements = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t L = 3 + rng.below(14);  // up to 16
    const std::size_t nq = rng.below(L - 2);
    const std::size_t nc = rng.below(L - 3 - nq + 1);
    Feature f = layout_feature(nq, nc, L);
    const std::size_t cap = 1 + rng.below(L);
    std::vector<double> s(L), e(L);
    const bool coarse = t % 2 == 0;  // integer logits force ties
    for (std::size_t i = 0; i < L; ++i) {
      s[i] = coarse ? double(rng.below(3)) : rng.uniform(-3, 3);
      e[i] = coarse ? double(rng.below(3)) : rng.uniform(-3, 3);
    }
    const auto got = extract_best_span(logits_from(s, e), f, cap);
    const auto want = best_span_oracle(s, e, f, cap);
    CHECK(got.null_score == s[0] + e[0]);
    if (!want.found) {
      CHECK(got.score_diff == kInf);
      agreements += got.score_diff == kInf;
      continue;
    }
    CHECK(got.start == want.start);
    CHECK(got.end == want.end);
    CHECK(got.best_nonnull_score == want.score);
    agreements += got.start == want.start && got.end == want.end;
  }
  CHECK(agreements == 1000);
}

TEST_CASE("threshold sweep equals exhaustive re-scoring") {
  SplitMix64 rng(77);
  for (int t = 0; t < 200; ++t) {
    std::vector<Prediction> preds;
    std::vector<GoldAnswer> golds;
    random_fixture(rng, 1 + rng.below(50), preds, golds);
    const auto got = sweep_null_threshold(preds, golds);
    const auto want = testing::exhaustive_sweep(preds, golds);
    CHECK(got.tau == want.tau);
    CHECK(got.f1 == doctest::Approx(want.f1).epsilon(1e-12));
    CHECK(got.f1 >= testing::overall_f1_at(preds, golds, 0.0) - 1e-12);
    CHECK(got.f1 == doctest::Approx(report(preds, golds, got.tau).overall.f1).epsilon(1e-12));
  }
}

TEST_CASE("threshold sweep degenerate slices") {
  // all answerable, all predicted correctly: keep every answer
  std::vector<Prediction> preds;
  std::vector<GoldAnswer> golds;
  for (int k = 0; k < 10; ++k) {
    golds.push_back({"a" + std::to_string(k), {"word" + std::to_string(k)}});
    preds.push_back(pred(golds.back().qid, "word" + std::to_string(k), 5.0 + k));
  }
  auto t = sweep_null_threshold(preds, golds);
  CHECK(t.tau == 14.0);
  CHECK(t.f1 == 100.0);
  CHECK(t.f1 == doctest::Approx(report(preds, golds, 1e9).hasans.f1));

  // all unanswerable: null everywhere
  for (auto& g : golds) g.texts.clear();
  t = sweep_null_threshold(preds, golds);
  CHECK(t.tau == -kInf);
  CHECK(t.f1 == 100.0);

  CHECK_THROWS_AS(sweep_null_threshold({}, golds), Error);
}

TEST_CASE("report on perfect and all-null predictors") {
  std::vector<Prediction> preds;
  std::vector<GoldAnswer> golds;
  for (int k = 0; k < 20; ++k) {
    GoldAnswer g{"k" + std::to_string(k), {}};
    if (k % 2 == 0) g.texts.push_back("answer " + std::to_string(k));
    golds.push_back(g);
    preds.push_back(pred(g.qid, g.texts.empty() ? "junk" : g.texts[0], g.texts.empty() ? 3.0 : -3.0));
  }
  auto r = report(preds, golds, 0.0);
  for (double v : {r.overall.em, r.overall.f1, r.noans.em, r.noans.f1, r.hasans.em, r.hasans.f1}) {
    CHECK(v == 100.0);
  }
  CHECK(r.noans.count == 10);
  CHECK(r.hasans.count == 10);
  CHECK(format_report(r).find("100.00") != std::string::npos);

  auto null = report(preds, golds, -kInf);
  CHECK(null.noans.em == 100.0);
  CHECK(null.noans.f1 == 100.0);
  CHECK(null.hasans.em == 0.0);
  CHECK(null.hasans.f1 == 0.0);
  CHECK(null.overall.em == 50.0);
  CHECK(null.overall.f1 == 50.0);
}

TEST_CASE("report slice identity and missing predictions") {
  SplitMix64 rng(4);
  for (int t = 0; t < 100; ++t) {
    std::vector<Prediction> preds;
    std::vector<GoldAnswer> golds;
    random_fixture(rng, 2 + rng.below(40), preds, golds);
    const double tau = rng.uniform(-5, 5);
    auto r = report(preds, golds, tau);
    const double n = double(r.overall.count);
    CHECK(r.noans.count + r.hasans.count == r.overall.count);
    CHECK(std::abs(r.overall.f1 - (r.noans.f1 * r.noans.count + r.hasans.f1 * r.hasans.count) / n) < 1e-9);
    CHECK(std::abs(r.overall.em - (r.noans.em * r.noans.count + r.hasans.em * r.hasans.count) / n) < 1e-9);
    CHECK(r.overall.em <= r.overall.f1 + 1e-12);
    CHECK(r.hasans.em <= r.hasans.f1 + 1e-12);
  }

  std::vector<Prediction> preds = {pred("a", "x", 0)};
  std::vector<GoldAnswer> golds = {{"a", {"x"}}, {"b", {}}, {"c", {"y"}}};
  try {
    report(preds, golds, 0.0);
    FAIL("missing qids accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kMismatch);
    const std::string msg = e.what();
    CHECK(msg.find(" b") != std::string::npos);
    CHECK(msg.find(" c") != std::string::npos);
  }
}

TEST_CASE("prediction files round trip") {
  std::vector<Prediction> preds = {pred("a", "Zürich \"old\" town", -1.25), pred("b", "", kInf),
                                   pred("c", "x", 3.5)};
  const auto pj = predictions_to_json(preds), nj = null_odds_to_json(preds);
  auto parsed = nlohmann::json::parse(nj);
  CHECK(parsed["b"].is_null());
  CHECK(parsed["a"].get<double>() == -1.25);

  auto back = predictions_from_json(pj, nj);
  REQUIRE(back.size() == 3);
  for (const auto& p : back) {
    const auto& want = *std::find_if(preds.begin(), preds.end(), [&](const auto& q) { return q.qid == p.qid; });
    CHECK(p.span_text == want.span_text);
    CHECK(p.score_diff == want.score_diff);
  }

  auto rj = nlohmann::json::parse(report_to_json(report(preds, {{"a", {"x"}}, {"b", {}}, {"c", {}}}, -kInf)));
  CHECK(rj["threshold"].is_null());
  CHECK(rj["noans_f1"].get<double>() == 100.0);
  CHECK(rj["overall_count"].get<int>() == 3);

  CHECK_THROWS_AS(predictions_from_json(R"({"a":"x"})", R"({"b":1.0})"), Error);
  CHECK_THROWS_AS(predictions_from_json("[", "{}"), Error);
}

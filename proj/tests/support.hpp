#pragma once

// Independent oracles and fixtures shared by the unit tests and the
// acceptance runner. Nothing here calls the code path it checks.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "spanqa/evaluator.hpp"
#include "spanqa/grad_check.hpp"
#include "spanqa/heads.hpp"
#include "spanqa/loss_opt.hpp"
#include "spanqa/random.hpp"
#include "spanqa/squad.hpp"
#include "spanqa/tensor.hpp"

namespace spanqa::testing {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, SplitMix64& rng, double scale = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-scale, scale));
  return t;
}

// out[l,f] = sum_{i,h} xpad[l+i,h] * k[i,h,f] + b[f], with xpad built explicitly.
inline Tensor<double> conv1d_oracle(const Tensor<double>& x, const Tensor<double>& k,
                                    const Tensor<double>& b) {
  const std::size_t L = x.dim(0), H = x.dim(1), w = k.dim(0), F = k.dim(2);
  const std::size_t left = (w - 1) / 2;
  const std::size_t right = w - 1 - left;
  std::vector<std::vector<double>> xpad(L + left + right, std::vector<double>(H, 0.0));
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) xpad[l + left][h] = x.at(l, h);
  }
  Tensor<double> out({L, F});
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t f = 0; f < F; ++f) {
      double acc = b[f];
      for (std::size_t i = 0; i < w; ++i) {
        for (std::size_t h = 0; h < H; ++h) acc += xpad[l + i][h] * k[(i * H + h) * F + f];
      }
      out.at(l, f) = acc;
    }
  }
  return out;
}

struct SpanChoice {
  bool found = false;
  std::size_t start = 0;
  std::size_t end = 0;
  double score = -std::numeric_limits<double>::infinity();
};

// Enumerates every (i, j) pair in the sequence and keeps the admissible maximum;
// ties resolve to the smaller i, then the smaller j.
inline SpanChoice best_span_oracle(const std::vector<double>& start,
                                   const std::vector<double>& end, const Feature& f,
                                   std::size_t max_answer_len) {
  SpanChoice best;
  for (std::size_t i = 0; i < f.valid_len; ++i) {
    for (std::size_t j = 0; j < f.valid_len; ++j) {
      if (i == 0 || j < i || j - i + 1 > max_answer_len) continue;
      if (!f.is_context_position(i) || !f.is_context_position(j)) continue;
      const double s = start[i] + end[j];
      const bool better = !best.found || s > best.score ||
                          (s == best.score && (i < best.start || (i == best.start && j < best.end)));
      if (better) best = {true, i, j, s};
    }
  }
  return best;
}

// Overall F1 (percent) recomputed from scratch for one threshold.
inline double overall_f1_at(const std::vector<Prediction>& preds, const std::vector<GoldAnswer>& golds,
                            double tau) {
  double sum = 0.0;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const bool null = preds[k].score_diff > tau;
    sum += f1_score(null ? std::string() : preds[k].span_text, golds[k].texts);
  }
  return 100.0 * sum / static_cast<double>(preds.size());
}

// Re-scores every candidate threshold; the smallest threshold whose summed F1
// is within 1e-9 of the best wins.
inline ThresholdChoice exhaustive_sweep(const std::vector<Prediction>& preds,
                                        const std::vector<GoldAnswer>& golds) {
  std::vector<double> candidates{-std::numeric_limits<double>::infinity()};
  for (const auto& p : preds) {
    if (std::isfinite(p.score_diff)) candidates.push_back(p.score_diff);
  }
  std::vector<double> scores;
  double top = -1.0;
  for (double tau : candidates) {
    scores.push_back(overall_f1_at(preds, golds, tau));
    top = std::max(top, scores.back());
  }
  ThresholdChoice best{std::numeric_limits<double>::infinity(), top};
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const double slack = 100.0 * 1e-9 / static_cast<double>(preds.size());
    if (scores[c] >= top - slack && candidates[c] < best.tau) best.tau = candidates[c];
  }
  return best;
}

// A feature with explicit layout: [CLS] q*n_question [SEP] ctx*n_context [SEP] [PAD]...
inline Feature layout_feature(std::size_t n_question, std::size_t n_context,
                              std::size_t max_seq_len) {
  Feature f;
  f.qid = "q";
  f.max_seq_len = max_seq_len;
  f.tokens.push_back(std::string(kClsToken));
  for (std::size_t i = 0; i < n_question; ++i) f.tokens.push_back("q" + std::to_string(i));
  f.tokens.push_back(std::string(kSepToken));
  f.context_offset = f.tokens.size();
  for (std::size_t i = 0; i < n_context; ++i) {
    const std::string tok = "w" + std::to_string(i);
    const std::size_t start = f.context.size();
    f.context += tok;
    f.token_to_char.emplace_back(start, f.context.size());
    f.context += ' ';
    f.tokens.push_back(tok);
  }
  f.tokens.push_back(std::string(kSepToken));
  f.valid_len = f.tokens.size();
  while (f.tokens.size() < max_seq_len) f.tokens.push_back(std::string(kPadToken));
  return f;
}

// End-to-end objective for gradient checks: span_loss of the head's output.
template <typename T>
struct HeadProblem {
  std::unique_ptr<HeadModel<T>> model;
  ParamStore<T> params;
  Tensor<T> x;
  std::size_t valid_len = 0;
  std::size_t start_gold = 0;
  std::size_t end_gold = 0;
  DropoutSpec dropout;

  T loss(const ParamStore<T>& p) const {
    return span_loss(model->forward(p, x, valid_len, dropout), start_gold, end_gold).loss;
  }
  typename ParamStore<T>::Map analytic() const {
    std::unique_ptr<HeadTape> tape;
    const auto logits = model->forward(params, x, valid_len, dropout, &tape);
    const auto res = span_loss(logits, start_gold, end_gold);
    auto grads = params.zero_grads();
    model->backward(params, *tape, res.grad, grads);
    return grads;
  }
  GradCheckResult check(const GradCheckOptions& options = {}) const {
    std::function<T(const ParamStore<T>&)> f = [this](const ParamStore<T>& p) { return loss(p); };
    return grad_check(f, params, analytic(), options);
  }
};

// Random biases are added so no ReLU unit sits at a kink and the pooled
// argmax is well separated from the runner-up.
template <typename T = long double>
HeadProblem<T> make_head_problem(const HeadConfig& config, std::size_t L, std::size_t valid_len,
                                 std::uint64_t seed) {
  HeadProblem<T> p;
  p.model = make_head<T>(config);
  p.params = p.model->init_params(seed);
  SplitMix64 rng(mix_seed(seed, 77));
  for (auto& [name, t] : p.params.params()) {
    if (name.find("bias") != std::string::npos) {
      for (auto& v : t.data()) v += static_cast<T>(rng.uniform(-0.2, 0.2));
    }
  }
  p.x = random_tensor<T>({L, config.hidden_size}, rng);
  for (std::size_t r = valid_len; r < L; ++r) {
    for (auto& v : p.x.row(r)) v = T{0};
  }
  p.valid_len = valid_len;
  p.start_gold = 1 + rng.below(valid_len - 1);
  p.end_gold = p.start_gold + rng.below(valid_len - p.start_gold);
  return p;
}

inline HeadConfig small_config(HeadVariant variant, std::size_t hidden = 16) {
  HeadConfig c;
  c.variant = variant;
  c.hidden_size = hidden;
  c.kernel_widths = {1, 2, 3};
  c.filters_per_kernel = 4;
  c.lstm_hidden = 4;
  c.context_channels = 4;
  c.generator_width = 3;
  c.applied_width = 3;
  c.dropout_keep_prob = 1.0;
  return c;
}

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("spanqa_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// SQuAD-shaped examples whose answers are single context words. Every
// article holds one context shared by `per_article` questions.
inline std::vector<SquadExample> synthetic_examples(std::size_t n, std::size_t per_article,
                                                    double impossible_fraction, std::uint64_t seed) {
  static const char* kWords[] = {"river", "mountain", "castle", "engine", "violin", "harbor",
                                 "garden", "comet",   "desert", "signal", "lantern", "forest",
                                 "glacier", "meadow", "canyon", "island"};
  SplitMix64 rng(seed);
  std::vector<SquadExample> out;
  std::string context;
  std::vector<std::pair<std::string, std::size_t>> words;
  for (std::size_t k = 0; k < n; ++k) {
    if (k % per_article == 0) {
      context.clear();
      words.clear();
      for (int w = 0; w < 10; ++w) {
        const std::string word = kWords[rng.below(16)] + std::to_string(rng.below(50));
        words.emplace_back(word, context.size());
        context += word + (w % 4 == 3 ? ". " : " ");
      }
      context.pop_back();
    }
    SquadExample ex;
    ex.qid = "s" + std::to_string(seed) + "_" + std::to_string(k);
    ex.article = k / per_article;
    ex.context = context;
    const auto& [word, pos] = words[rng.below(words.size())];
    ex.is_impossible = rng.uniform() < impossible_fraction;
    ex.question = "where is the " + (ex.is_impossible ? std::string("unicorn") : word) + " ?";
    if (!ex.is_impossible) ex.answers.push_back({word, pos});
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace spanqa::testing

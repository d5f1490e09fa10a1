#pragma once

// SQuAD 2.0 ingestion, tokenization, featurization, splitting and batching.
//
// All character offsets in this module are BYTE offsets into UTF-8 text.
// SQuAD's answer_start counts code points and is converted on parse.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace spanqa {

struct Answer {
  std::string text;
  std::size_t char_start = 0;  // byte offset into the context
};

struct SquadExample {
  std::string qid;
  std::string question;
  std::string context;
  std::vector<Answer> answers;
  bool is_impossible = false;
  std::size_t article = 0;  // index of the enclosing data[] entry
};

// Throws ErrorKind::kParse with a JSON path on malformed input, missing
// fields, misaligned answers or duplicate ids.
std::vector<SquadExample> parse_squad_json(std::string_view document);
std::vector<SquadExample> load_squad_file(const std::filesystem::path& path);

struct Token {
  std::string text;
  std::size_t char_start = 0;
  std::size_t char_end = 0;
};

// Lowercases ASCII, splits on whitespace, and emits each punctuation
// character as its own token. text.substr(start, end - start), lowercased,
// equals the token text.
std::vector<Token> tokenize(std::string_view text);

inline constexpr std::string_view kClsToken = "[CLS]";
inline constexpr std::string_view kSepToken = "[SEP]";
inline constexpr std::string_view kPadToken = "[PAD]";

// [CLS] question [SEP] context [SEP], padded with [PAD] to max_seq_len.
struct Feature {
  std::string qid;
  std::vector<std::string> tokens;
  std::size_t max_seq_len = 0;
  std::size_t valid_len = 0;
  std::size_t context_offset = 0;  // index of the first context token
  // (char_start, char_end) of each context token kept in the window.
  std::vector<std::pair<std::size_t, std::size_t>> token_to_char;
  std::size_t start_pos = 0;
  std::size_t end_pos = 0;
  bool is_impossible = false;
  std::string context;

  std::size_t context_tokens() const { return token_to_char.size(); }
  bool is_context_position(std::size_t pos) const {
    return pos >= context_offset && pos < context_offset + token_to_char.size();
  }
  // Context text covered by token positions [first, last].
  std::string span_text(std::size_t first, std::size_t last) const;
};

enum class FeaturizeMode { kTraining, kEvaluation };

// Returns nullopt (skip) when a training answer falls outside the window;
// in evaluation mode such examples get the null target (0, 0).
// Throws ErrorKind::kRange when the question alone does not fit.
std::optional<Feature> featurize(const SquadExample& example, std::size_t max_seq_len,
                                 FeaturizeMode mode);

struct Split {
  std::vector<SquadExample> train;
  std::vector<SquadExample> eval;
};

// Article-level split: all questions of an article land on one side.
// The eval side receives round(fraction * articles) articles, clamped to
// [1, articles - 1] when there are at least two articles.
Split split_train_eval(const std::vector<SquadExample>& examples, double fraction,
                       std::uint64_t seed);

// Index batches for one epoch, shuffled by (seed, epoch). The final batch
// may be short.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n_items,
                                                    std::size_t batch_size,
                                                    std::uint64_t seed,
                                                    std::size_t epoch);

// Endless batch stream over successive epochs.
class BatchIterator {
 public:
  BatchIterator(std::size_t n_items, std::size_t batch_size, std::uint64_t seed);

  std::vector<std::size_t> next();
  std::size_t epoch() const { return epoch_; }
  // Position after `batches` calls to next(), for resuming.
  void skip(std::size_t batches);

 private:
  std::size_t n_items_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::vector<std::size_t>> current_;
};

}  // namespace spanqa

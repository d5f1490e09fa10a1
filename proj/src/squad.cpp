#include "spanqa/squad.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "spanqa/binary_io.hpp"
#include "spanqa/error.hpp"
#include "spanqa/random.hpp"

namespace spanqa {

using json = nlohmann::json;

namespace {

bool is_continuation(unsigned char c) { return (c & 0xC0) == 0x80; }

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead & 0xE0) == 0xC0) return 2;
  if ((lead & 0xF0) == 0xE0) return 3;
  if ((lead & 0xF8) == 0xF0) return 4;
  return 1;
}

// Code point index -> byte offset; npos when past the end.
std::size_t codepoint_to_byte(std::string_view s, std::size_t cp) {
  std::size_t count = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || !is_continuation(static_cast<unsigned char>(s[i]))) {
      if (count == cp) return i;
      ++count;
    }
  }
  return std::string_view::npos;
}

std::uint32_t decode_at(std::string_view s, std::size_t i, std::size_t len) {
  const auto b = [&](std::size_t k) { return static_cast<unsigned char>(s[i + k]); };
  switch (len) {
    case 2: return ((b(0) & 0x1Fu) << 6) | (b(1) & 0x3Fu);
    case 3: return ((b(0) & 0x0Fu) << 12) | ((b(1) & 0x3Fu) << 6) | (b(2) & 0x3Fu);
    case 4:
      return ((b(0) & 0x07u) << 18) | ((b(1) & 0x3Fu) << 12) | ((b(2) & 0x3Fu) << 6) |
             (b(3) & 0x3Fu);
    default: return b(0);
  }
}

bool is_space_cp(std::uint32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\v' || cp == '\f' ||
         cp == 0xA0 || (cp >= 0x2000 && cp <= 0x200B) || cp == 0x202F || cp == 0x3000;
}

bool is_punct_cp(std::uint32_t cp) {
  if (cp < 0x80) return std::ispunct(static_cast<int>(cp)) != 0;
  // General punctuation: dashes, quotes, ellipsis.
  return (cp >= 0x2010 && cp <= 0x2027) || cp == 0xAB || cp == 0xBB;
}

std::string collapse_whitespace(std::string_view s) {
  std::string out;
  bool pending = false;
  for (char ch : s) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      pending = !out.empty();
    } else {
      if (pending) out.push_back(' ');
      pending = false;
      out.push_back(ch);
    }
  }
  return out;
}

const json& require_field(const json& obj, const char* key, const std::string& path) {
  if (!obj.is_object()) throw Error(ErrorKind::kParse, path + ": expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw Error(ErrorKind::kParse, path + ": missing field '" + key + "'");
  }
  return *it;
}

std::string require_string(const json& obj, const char* key, const std::string& path) {
  const json& v = require_field(obj, key, path);
  if (!v.is_string()) throw Error(ErrorKind::kParse, path + "." + key + ": expected a string");
  return v.get<std::string>();
}

const json& require_array(const json& obj, const char* key, const std::string& path) {
  const json& v = require_field(obj, key, path);
  if (!v.is_array()) throw Error(ErrorKind::kParse, path + "." + key + ": expected an array");
  return v;
}

}  // namespace

std::vector<SquadExample> parse_squad_json(std::string_view document) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kParse, std::string("$: malformed JSON: ") + e.what());
  }
  std::vector<SquadExample> out;
  std::unordered_set<std::string> seen;
  const json& data = require_array(doc, "data", "$");
  for (std::size_t a = 0; a < data.size(); ++a) {
    const std::string apath = "$.data[" + std::to_string(a) + "]";
    const json& paragraphs = require_array(data[a], "paragraphs", apath);
    for (std::size_t p = 0; p < paragraphs.size(); ++p) {
      const std::string ppath = apath + ".paragraphs[" + std::to_string(p) + "]";
      const std::string context = require_string(paragraphs[p], "context", ppath);
      const json& qas = require_array(paragraphs[p], "qas", ppath);
      for (std::size_t q = 0; q < qas.size(); ++q) {
        const std::string qpath = ppath + ".qas[" + std::to_string(q) + "]";
        SquadExample ex;
        ex.qid = require_string(qas[q], "id", qpath);
        ex.question = require_string(qas[q], "question", qpath);
        ex.context = context;
        ex.article = a;
        auto imp = qas[q].find("is_impossible");
        if (imp != qas[q].end()) {
          if (!imp->is_boolean()) {
            throw Error(ErrorKind::kParse, qpath + ".is_impossible: expected a boolean");
          }
          ex.is_impossible = imp->get<bool>();
        }
        const json& answers = require_array(qas[q], "answers", qpath);
        for (std::size_t k = 0; k < answers.size(); ++k) {
          const std::string kpath = qpath + ".answers[" + std::to_string(k) + "]";
          Answer ans;
          ans.text = require_string(answers[k], "text", kpath);
          const json& start = require_field(answers[k], "answer_start", kpath);
          if (!start.is_number_integer() || start.get<long long>() < 0) {
            throw Error(ErrorKind::kParse, kpath + ".answer_start: expected a non-negative integer");
          }
          const std::size_t byte = codepoint_to_byte(context, start.get<std::size_t>());
          if (byte == std::string_view::npos || byte + ans.text.size() > context.size() ||
              collapse_whitespace(std::string_view(context).substr(byte, ans.text.size())) !=
                  collapse_whitespace(ans.text)) {
            throw Error(ErrorKind::kParse,
                        kpath + ": answer text does not match the context at answer_start");
          }
          ans.char_start = byte;
          ex.answers.push_back(std::move(ans));
        }
        if (ex.is_impossible) {
          ex.answers.clear();
        } else if (ex.answers.empty()) {
          throw Error(ErrorKind::kParse, qpath + ": answerable question without answers");
        }
        if (!seen.insert(ex.qid).second) {
          throw Error(ErrorKind::kParse, qpath + ".id: duplicate qid '" + ex.qid + "'");
        }
        out.push_back(std::move(ex));
      }
    }
  }
  return out;
}

std::vector<SquadExample> load_squad_file(const std::filesystem::path& path) {
  return parse_squad_json(read_file(path));
}

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> tokens;
  Token current;
  bool open = false;
  auto flush = [&] {
    if (open) tokens.push_back(std::move(current));
    current = Token{};
    open = false;
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = std::min(utf8_length(lead), text.size() - i);
    const std::uint32_t cp = decode_at(text, i, len);
    if (is_space_cp(cp)) {
      flush();
    } else if (is_punct_cp(cp)) {
      flush();
      tokens.push_back(Token{std::string(text.substr(i, len)), i, i + len});
    } else {
      if (!open) {
        current.char_start = i;
        open = true;
      }
      for (std::size_t k = 0; k < len; ++k) {
        const char ch = text[i + k];
        current.text.push_back(len == 1 ? static_cast<char>(std::tolower(static_cast<unsigned char>(ch))) : ch);
      }
      current.char_end = i + len;
    }
    i += len;
  }
  flush();
  return tokens;
}

std::string Feature::span_text(std::size_t first, std::size_t last) const {
  if (!is_context_position(first) || !is_context_position(last) || last < first) return {};
  const auto begin = token_to_char[first - context_offset].first;
  const auto end = token_to_char[last - context_offset].second;
  return context.substr(begin, end - begin);
}

std::optional<Feature> featurize(const SquadExample& example, std::size_t max_seq_len,
                                 FeaturizeMode mode) {
  const auto q = tokenize(example.question);
  if (q.size() + 3 > max_seq_len) {
    throw Error(ErrorKind::kRange, "question '" + example.qid + "' has " +
                                       std::to_string(q.size()) +
                                       " tokens; max_seq_len " +
                                       std::to_string(max_seq_len) + " leaves room for " +
                                       std::to_string(max_seq_len < 3 ? 0 : max_seq_len - 3));
  }
  const auto c = tokenize(example.context);
  const std::size_t window = std::min(c.size(), max_seq_len - q.size() - 3);

  Feature f;
  f.qid = example.qid;
  f.max_seq_len = max_seq_len;
  f.context = example.context;
  f.is_impossible = example.is_impossible;
  f.tokens.reserve(max_seq_len);
  f.tokens.emplace_back(kClsToken);
  for (const auto& t : q) f.tokens.push_back(t.text);
  f.tokens.emplace_back(kSepToken);
  f.context_offset = f.tokens.size();
  for (std::size_t t = 0; t < window; ++t) {
    f.tokens.push_back(c[t].text);
    f.token_to_char.emplace_back(c[t].char_start, c[t].char_end);
  }
  f.tokens.emplace_back(kSepToken);
  f.valid_len = f.tokens.size();
  f.tokens.resize(max_seq_len, std::string(kPadToken));

  if (example.is_impossible || example.answers.empty()) return f;

  const Answer& ans = example.answers.front();
  const std::size_t s = ans.char_start, e = ans.char_start + ans.text.size();
  std::optional<std::size_t> first, last;
  for (std::size_t t = 0; t < c.size(); ++t) {
    if (!first && c[t].char_end > s) first = t;
    if (c[t].char_start < e) last = t;
  }
  if (!first || !last || *last < *first || *last >= window) {
    if (mode == FeaturizeMode::kTraining) return std::nullopt;
    return f;
  }
  f.start_pos = f.context_offset + *first;
  f.end_pos = f.context_offset + *last;
  return f;
}

Split split_train_eval(const std::vector<SquadExample>& examples, double fraction,
                       std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw Error(ErrorKind::kConfig, "split fraction must be in (0, 1)");
  }
  std::vector<std::size_t> articles;
  {
    std::set<std::size_t> ids;
    for (const auto& ex : examples) ids.insert(ex.article);
    articles.assign(ids.begin(), ids.end());
  }
  SplitMix64 rng(seed);
  shuffle(articles, rng);
  const std::size_t n = articles.size();
  auto n_eval = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (n >= 2) n_eval = std::clamp<std::size_t>(n_eval, 1, n - 1);
  const std::set<std::size_t> eval_ids(articles.begin(),
                                       articles.begin() + static_cast<std::ptrdiff_t>(n_eval));
  Split out;
  for (const auto& ex : examples) {
    (eval_ids.count(ex.article) ? out.eval : out.train).push_back(ex);
  }
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n_items,
                                                    std::size_t batch_size,
                                                    std::uint64_t seed,
                                                    std::size_t epoch) {
  if (batch_size < 1) throw Error(ErrorKind::kConfig, "batch_size must be >= 1");
  std::vector<std::size_t> order(n_items);
  for (std::size_t i = 0; i < n_items; ++i) order[i] = i;
  SplitMix64 rng(mix_seed(seed, epoch));
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n_items; i += batch_size) {
    const std::size_t end = std::min(n_items, i + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

BatchIterator::BatchIterator(std::size_t n_items, std::size_t batch_size, std::uint64_t seed)
    : n_items_(n_items), batch_size_(batch_size), seed_(seed) {
  if (n_items_ == 0) throw Error(ErrorKind::kConfig, "cannot batch an empty dataset");
  current_ = epoch_batches(n_items_, batch_size_, seed_, epoch_);
}

std::vector<std::size_t> BatchIterator::next() {
  if (cursor_ == current_.size()) {
    ++epoch_;
    cursor_ = 0;
    current_ = epoch_batches(n_items_, batch_size_, seed_, epoch_);
  }
  return current_[cursor_++];
}

void BatchIterator::skip(std::size_t batches) {
  const std::size_t per_epoch = current_.size();
  epoch_ = batches / per_epoch;
  cursor_ = batches % per_epoch;
  current_ = epoch_batches(n_items_, batch_size_, seed_, epoch_);
}

}  // namespace spanqa

#include "spanqa/embeddings.hpp"

#include <cmath>
#include <string_view>

#include "spanqa/binary_io.hpp"
#include "spanqa/random.hpp"

namespace spanqa {

namespace {

constexpr std::string_view kBembMagic = "BEMB";
constexpr double kPositionScale = 0.1;
constexpr double kSegmentScale = 0.1;

std::vector<float> unit_vector(std::uint64_t key, std::size_t hidden) {
  SplitMix64 rng(key);
  std::vector<double> v(hidden);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  std::vector<float> out(hidden);
  for (std::size_t i = 0; i < hidden; ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

std::uint32_t read_u32(std::ifstream& in, const std::string& path, std::size_t& offset,
                       bool allow_eof, bool* eof) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got == 0 && allow_eof) {
    *eof = true;
    return 0;
  }
  if (got != 4) {
    throw Error(ErrorKind::kFormat, path + ": truncated record at byte " + std::to_string(offset));
  }
  offset += 4;
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

std::vector<float> synthetic_token_vector(const std::string& token, std::size_t hidden,
                                          std::uint64_t seed) {
  return unit_vector(mix_seed(seed, fnv1a64(token)), hidden);
}

std::vector<float> synthetic_position_vector(std::size_t position, std::size_t hidden) {
  std::vector<float> out(hidden, 0.0f);
  const std::size_t pairs = hidden / 2;
  if (pairs == 0) return out;
  const double scale = kPositionScale / std::sqrt(static_cast<double>(pairs));
  for (std::size_t k = 0; k < pairs; ++k) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(hidden));
    const double angle = static_cast<double>(position) * freq;
    out[2 * k] = static_cast<float>(scale * std::sin(angle));
    out[2 * k + 1] = static_cast<float>(scale * std::cos(angle));
  }
  return out;
}

std::vector<float> synthetic_segment_vector(int segment, std::size_t hidden,
                                            std::uint64_t seed) {
  auto v = unit_vector(mix_seed(seed, fnv1a64("[SEGMENT]" + std::to_string(segment))), hidden);
  for (auto& x : v) x = static_cast<float>(x * kSegmentScale);
  return v;
}

EmbeddedSequence synthetic_embed(const Feature& feature, std::size_t hidden,
                                 std::uint64_t seed) {
  if (hidden < 8) throw Error(ErrorKind::kConfig, "synthetic embeddings need H >= 8");
  EmbeddedSequence seq{feature, Tensor<float>({feature.max_seq_len, hidden})};
  const auto seg0 = synthetic_segment_vector(0, hidden, seed);
  const auto seg1 = synthetic_segment_vector(1, hidden, seed);
  for (std::size_t pos = 0; pos < feature.valid_len; ++pos) {
    const auto tok = synthetic_token_vector(feature.tokens[pos], hidden, seed);
    const auto posv = synthetic_position_vector(pos, hidden);
    const auto& seg = pos < feature.context_offset ? seg0 : seg1;
    auto row = seq.embeddings.row(pos);
    for (std::size_t h = 0; h < hidden; ++h) row[h] = tok[h] + posv[h] + seg[h];
  }
  return seq;
}

BembWriter::BembWriter(const std::filesystem::path& path, std::size_t hidden)
    : out_(path, std::ios::binary | std::ios::trunc), hidden_(hidden) {
  if (!out_) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  ByteWriter w;
  w.bytes(kBembMagic);
  w.u32(kBembVersion);
  w.u32(static_cast<std::uint32_t>(hidden));
  out_.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
}

void BembWriter::write(const std::string& qid, const Tensor<float>& embeddings) {
  if (embeddings.rank() != 2 || embeddings.dim(1) != hidden_) {
    throw Error(ErrorKind::kShape, "BEMB record '" + qid + "' has shape " +
                                       shape_to_string(embeddings.shape()) +
                                       ", file H is " + std::to_string(hidden_));
  }
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(qid.size()));
  w.bytes(qid);
  w.u32(static_cast<std::uint32_t>(embeddings.dim(0)));
  for (float v : embeddings.data()) w.f32(v);
  out_.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out_) throw Error(ErrorKind::kIo, "BEMB write failed");
}

void BembWriter::close() { out_.close(); }

BembReader::BembReader(const std::filesystem::path& path)
    : path_(path.string()), in_(path, std::ios::binary) {
  if (!in_) throw Error(ErrorKind::kIo, "cannot open '" + path_ + "' for reading");
  char magic[4] = {};
  in_.read(magic, 4);
  if (in_.gcount() != 4 || std::string_view(magic, 4) != kBembMagic) {
    throw Error(ErrorKind::kFormat, path_ + ": bad magic (expected BEMB)");
  }
  offset_ = 4;
  const auto version = read_u32(in_, path_, offset_, false, nullptr);
  if (version != kBembVersion) {
    throw Error(ErrorKind::kFormat, path_ + ": unsupported BEMB version " + std::to_string(version));
  }
  hidden_ = read_u32(in_, path_, offset_, false, nullptr);
}

std::optional<BembRecord> BembReader::next() {
  bool eof = false;
  const auto qid_len = read_u32(in_, path_, offset_, true, &eof);
  if (eof) return std::nullopt;
  BembRecord rec;
  rec.qid.resize(qid_len);
  in_.read(rec.qid.data(), qid_len);
  if (static_cast<std::size_t>(in_.gcount()) != qid_len) {
    throw Error(ErrorKind::kFormat, path_ + ": truncated qid at byte " + std::to_string(offset_));
  }
  offset_ += qid_len;
  const auto len = read_u32(in_, path_, offset_, false, nullptr);
  const std::size_t n = static_cast<std::size_t>(len) * hidden_;
  std::string raw(n * 4, '\0');
  in_.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in_.gcount()) != raw.size()) {
    throw Error(ErrorKind::kFormat, path_ + ": truncated record '" + rec.qid + "' at byte " +
                                        std::to_string(offset_));
  }
  offset_ += raw.size();
  ByteReader r(raw, path_);
  std::vector<float> values(n);
  for (auto& v : values) v = r.f32();
  rec.embeddings = Tensor<float>({len, hidden_}, std::move(values));
  return rec;
}

namespace {

EmbeddedSequence pad_record(const Feature& feature, const Tensor<float>& rows,
                            std::size_t hidden) {
  if (rows.dim(0) != feature.valid_len) {
    throw Error(ErrorKind::kMismatch, "embeddings for '" + feature.qid + "' have " +
                                          std::to_string(rows.dim(0)) + " rows but the feature has " +
                                          std::to_string(feature.valid_len) + " tokens");
  }
  EmbeddedSequence seq{feature, Tensor<float>({feature.max_seq_len, hidden})};
  std::copy(rows.data().begin(), rows.data().end(), seq.embeddings.data().begin());
  return seq;
}

}  // namespace

std::vector<EmbeddedSequence> load_embeddings(const std::filesystem::path& path,
                                              const std::vector<Feature>& features,
                                              std::size_t expected_hidden) {
  BembReader reader(path);
  if (reader.hidden() != expected_hidden) {
    throw Error(ErrorKind::kMismatch, path.string() + ": file H=" +
                                          std::to_string(reader.hidden()) +
                                          " but configured H=" + std::to_string(expected_hidden));
  }
  std::map<std::string, const Feature*> by_qid;
  for (const auto& f : features) by_qid.emplace(f.qid, &f);
  std::vector<EmbeddedSequence> out;
  while (auto rec = reader.next()) {
    auto it = by_qid.find(rec->qid);
    if (it == by_qid.end()) {
      throw Error(ErrorKind::kMismatch, path.string() + ": unknown qid '" + rec->qid + "'");
    }
    out.push_back(pad_record(*it->second, rec->embeddings, reader.hidden()));
  }
  return out;
}

SyntheticEmbeddings::SyntheticEmbeddings(std::size_t hidden, std::uint64_t seed)
    : hidden_(hidden), seed_(seed) {
  if (hidden < 8) throw Error(ErrorKind::kConfig, "synthetic embeddings need H >= 8");
}

EmbeddedSequence SyntheticEmbeddings::embed(const Feature& feature) const {
  return synthetic_embed(feature, hidden_, seed_);
}

FileEmbeddings::FileEmbeddings(const std::filesystem::path& path) {
  BembReader reader(path);
  hidden_ = reader.hidden();
  while (auto rec = reader.next()) {
    const std::string qid = rec->qid;
    if (!records_.emplace(qid, std::move(rec->embeddings)).second) {
      throw Error(ErrorKind::kFormat, path.string() + ": duplicate qid '" + qid + "'");
    }
  }
}

EmbeddedSequence FileEmbeddings::embed(const Feature& feature) const {
  auto it = records_.find(feature.qid);
  if (it == records_.end()) {
    throw Error(ErrorKind::kMismatch, "no embeddings for qid '" + feature.qid + "'");
  }
  return pad_record(feature, it->second, hidden_);
}

std::unique_ptr<EmbeddingSource> make_embedding_source(const std::string& spec) {
  constexpr std::string_view prefix = "synthetic:";
  if (spec.rfind(prefix, 0) == 0) {
    const std::string rest = spec.substr(prefix.size());
    const auto comma = rest.find(',');
    try {
      const std::size_t hidden = std::stoul(rest.substr(0, comma));
      const std::uint64_t seed =
          comma == std::string::npos ? 0 : std::stoull(rest.substr(comma + 1));
      return std::make_unique<SyntheticEmbeddings>(hidden, seed);
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::kConfig, "embeddings spec '" + spec + "' is not synthetic:H,seed");
    }
  }
  return std::make_unique<FileEmbeddings>(spec);
}

}  // namespace spanqa

#pragma once

// Frozen per-token embeddings: a synthetic generator for desk-scale runs and
// the BEMB file format written by an external encoder.
//
// BEMB (little-endian):
//   "BEMB" | u32 version = 1 | u32 H
//   then per record until EOF:
//   u32 qid byte length | qid UTF-8 | u32 L | L*H f32 row-major

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "spanqa/squad.hpp"
#include "spanqa/tensor.hpp"

namespace spanqa {

struct EmbeddedSequence {
  Feature feature;
  Tensor<float> embeddings;  // max_seq_len x H, zero rows past valid_len
};

// Unit vector keyed by (token, seed).
std::vector<float> synthetic_token_vector(const std::string& token, std::size_t hidden,
                                          std::uint64_t seed);
// Sinusoidal position term with norm 0.1.
std::vector<float> synthetic_position_vector(std::size_t position, std::size_t hidden);
// Segment 0 = [CLS] question [SEP], 1 = context and the final [SEP]. Norm 0.1.
std::vector<float> synthetic_segment_vector(int segment, std::size_t hidden,
                                            std::uint64_t seed);

// token + position + segment for each valid token.
EmbeddedSequence synthetic_embed(const Feature& feature, std::size_t hidden,
                                 std::uint64_t seed);

inline constexpr std::uint32_t kBembVersion = 1;

struct BembRecord {
  std::string qid;
  Tensor<float> embeddings;  // L x H
};

class BembWriter {
 public:
  BembWriter(const std::filesystem::path& path, std::size_t hidden);
  void write(const std::string& qid, const Tensor<float>& embeddings);
  void close();

 private:
  std::ofstream out_;
  std::size_t hidden_;
};

class BembReader {
 public:
  explicit BembReader(const std::filesystem::path& path);

  std::size_t hidden() const { return hidden_; }
  std::optional<BembRecord> next();

 private:
  std::string path_;
  std::ifstream in_;
  std::size_t hidden_ = 0;
  std::size_t offset_ = 0;
};

// Reads every record, matches it to `features` by qid and pads it to the
// feature's max_seq_len. Errors on header mismatch, truncation, unknown qid,
// H != expected_hidden, or L != valid_len.
std::vector<EmbeddedSequence> load_embeddings(const std::filesystem::path& path,
                                              const std::vector<Feature>& features,
                                              std::size_t expected_hidden);

class EmbeddingSource {
 public:
  virtual ~EmbeddingSource() = default;
  virtual std::size_t hidden() const = 0;
  virtual EmbeddedSequence embed(const Feature& feature) const = 0;
};

class SyntheticEmbeddings final : public EmbeddingSource {
 public:
  SyntheticEmbeddings(std::size_t hidden, std::uint64_t seed);
  std::size_t hidden() const override { return hidden_; }
  EmbeddedSequence embed(const Feature& feature) const override;

 private:
  std::size_t hidden_;
  std::uint64_t seed_;
};

class FileEmbeddings final : public EmbeddingSource {
 public:
  explicit FileEmbeddings(const std::filesystem::path& path);
  std::size_t hidden() const override { return hidden_; }
  EmbeddedSequence embed(const Feature& feature) const override;

 private:
  std::size_t hidden_ = 0;
  std::map<std::string, Tensor<float>> records_;
};

// "synthetic:H,seed" or a BEMB path.
std::unique_ptr<EmbeddingSource> make_embedding_source(const std::string& spec);

}  // namespace spanqa

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "spanqa/heads.hpp"
#include "spanqa/tensor.hpp"

namespace spanqa {

// Checkpoint layout (little-endian):
//   "SHLB" | u32 version = 1 | u64 config digest
//   then per parameter, in name order until EOF:
//   u32 name length | name bytes | u32 rank | rank x u32 dims | f32 values
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t digest = 0;
  ParamStore<float> params;
};

std::string encode_checkpoint(const ParamStore<float>::Map& tensors, std::uint64_t digest);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source = "checkpoint");

void save_checkpoint(const std::filesystem::path& path,
                     const ParamStore<float>::Map& tensors, std::uint64_t digest);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Loads and checks the digest and parameter layout against `config`.
ParamStore<float> load_checkpoint_for(const std::filesystem::path& path,
                                      const HeadConfig& config);

}  // namespace spanqa

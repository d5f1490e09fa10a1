#include "spanqa/checkpoint.hpp"

#include <sstream>

#include "spanqa/binary_io.hpp"

namespace spanqa {

namespace {
constexpr std::string_view kMagic = "SHLB";
}

std::string encode_checkpoint(const ParamStore<float>::Map& tensors, std::uint64_t digest) {
  ByteWriter w;
  w.bytes(kMagic);
  w.u32(kCheckpointVersion);
  w.u64(digest);
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data()) w.f32(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source) {
  ByteReader r(bytes, source);
  if (bytes.size() < kMagic.size() || r.bytes(kMagic.size()) != kMagic) {
    throw Error(ErrorKind::kFormat, source + ": bad magic (expected SHLB)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::kFormat, source + ": unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.digest = r.u64();
  while (!r.at_end()) {
    const auto name_len = r.u32();
    std::string name(r.bytes(name_len));
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::size_t n = shape_numel(shape);
    if ((bytes.size() - r.offset()) / 4 < n) {
      throw Error(ErrorKind::kFormat, source + ": truncated values for '" + name + "'");
    }
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32();
    ckpt.params.add(name, Tensor<float>(std::move(shape), std::move(values)));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path,
                     const ParamStore<float>::Map& tensors, std::uint64_t digest) {
  write_file_atomic(path, encode_checkpoint(tensors, digest));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

ParamStore<float> load_checkpoint_for(const std::filesystem::path& path,
                                      const HeadConfig& config) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.digest != config.digest()) {
    std::ostringstream os;
    os << path.string() << ": config digest " << std::hex << ckpt.digest
       << " does not match head config (" << config.canonical() << ", digest "
       << config.digest() << ")";
    throw Error(ErrorKind::kMismatch, os.str());
  }
  const auto expected = make_head<float>(config)->init_params(0);
  for (const auto& [name, t] : expected.params()) {
    if (!ckpt.params.contains(name) || ckpt.params.param(name).shape() != t.shape()) {
      throw Error(ErrorKind::kMismatch,
                  path.string() + ": parameter '" + name + "' missing or misshapen");
    }
  }
  if (ckpt.params.params().size() != expected.params().size()) {
    throw Error(ErrorKind::kMismatch, path.string() + ": unexpected extra parameters");
  }
  return std::move(ckpt.params);
}

}  // namespace spanqa

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "loma/model.hpp"

namespace loma {

// Checkpoint layout (little-endian): 8-byte magic, u32 version, u8 scalar
// width, config fields, then named parameter matrices as raw row-major data.
// Reload is byte-for-byte, so logits after reload are bit-identical.
inline constexpr char kCheckpointMagic[8] = {'L', 'O', 'M', 'A', 'C', 'K', 'P', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("checkpoint: truncated file");
  return v;
}

}  // namespace detail

template <class S>
void save_checkpoint(Model<S>& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, static_cast<std::uint8_t>(sizeof(S)));
  detail::write_pod(out, static_cast<std::int32_t>(m.cfg.n_layers));
  detail::write_pod(out, static_cast<std::int32_t>(m.cfg.n_heads));
  detail::write_pod(out, static_cast<std::int32_t>(m.cfg.d_model));
  detail::write_pod(out, static_cast<std::int32_t>(m.cfg.d_head));
  detail::write_pod(out, static_cast<std::int32_t>(m.cfg.d_ff));
  detail::write_pod(out, static_cast<std::int32_t>(m.cfg.vocab_size));
  detail::write_pod(out, static_cast<std::int32_t>(m.cfg.max_position));
  detail::write_pod(out, static_cast<std::uint64_t>(m.cfg.seed));
  detail::write_pod(out, m.cfg.rope_base);

  const auto params = m.named_params();
  detail::write_pod(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& np : params) {
    detail::write_pod(out, static_cast<std::uint16_t>(np.name.size()));
    out.write(np.name.data(), static_cast<std::streamsize>(np.name.size()));
    detail::write_pod(out, static_cast<std::int64_t>(np.param->rows()));
    detail::write_pod(out, static_cast<std::int64_t>(np.param->cols()));
    out.write(reinterpret_cast<const char*>(np.param->value.data()),
              static_cast<std::streamsize>(sizeof(S) * static_cast<std::size_t>(np.param->value.size())));
  }
  if (!out) throw IoError("write failed for checkpoint " + path);
}

// Scalar width recorded in a checkpoint header (4 or 8 bytes).
inline int checkpoint_scalar_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("checkpoint " + path + ": bad magic");
  }
  const auto version = detail::read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint " + path + ": unsupported version " + std::to_string(version));
  }
  return static_cast<int>(detail::read_pod<std::uint8_t>(in));
}

template <class S>
Model<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("checkpoint " + path + ": bad magic");
  }
  const auto version = detail::read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint " + path + ": unsupported version " + std::to_string(version));
  }
  const auto scalar_bytes = detail::read_pod<std::uint8_t>(in);
  if (scalar_bytes != sizeof(S)) {
    throw ConfigError("checkpoint " + path + ": scalar width " + std::to_string(scalar_bytes) +
                      " does not match requested " + std::to_string(sizeof(S)));
  }
  ModelConfig cfg;
  cfg.n_layers = detail::read_pod<std::int32_t>(in);
  cfg.n_heads = detail::read_pod<std::int32_t>(in);
  cfg.d_model = detail::read_pod<std::int32_t>(in);
  cfg.d_head = detail::read_pod<std::int32_t>(in);
  cfg.d_ff = detail::read_pod<std::int32_t>(in);
  cfg.vocab_size = detail::read_pod<std::int32_t>(in);
  cfg.max_position = detail::read_pod<std::int32_t>(in);
  cfg.seed = detail::read_pod<std::uint64_t>(in);
  cfg.rope_base = detail::read_pod<double>(in);

  Model<S> m = init_model<S>(cfg);
  auto params = m.named_params();
  const auto count = detail::read_pod<std::uint32_t>(in);
  if (count != params.size()) {
    throw IoError("checkpoint " + path + ": parameter count " + std::to_string(count) +
                  " != expected " + std::to_string(params.size()));
  }
  for (auto& np : params) {
    const auto name_len = detail::read_pod<std::uint16_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in || name != np.name) throw IoError("checkpoint " + path + ": parameter order mismatch at " + np.name);
    const auto rows = detail::read_pod<std::int64_t>(in);
    const auto cols = detail::read_pod<std::int64_t>(in);
    if (rows != np.param->rows() || cols != np.param->cols()) {
      throw IoError("checkpoint " + path + ": shape mismatch for " + np.name);
    }
    in.read(reinterpret_cast<char*>(np.param->value.data()),
            static_cast<std::streamsize>(sizeof(S) * static_cast<std::size_t>(np.param->value.size())));
    if (!in) throw IoError("checkpoint " + path + ": truncated data for " + np.name);
  }
  return m;
}

}  // namespace loma

#pragma once

// Checkpoint container: a flat binary file of named 2-D double tensors plus a
// JSON sidecar describing how the model was configured.
//
// Layout (all integers unsigned 64-bit little-endian, doubles IEEE-754
// little-endian):
//   magic "GLYCKPT1"
//   tensor_count
//   repeated: name_len, name bytes, rows, cols, rows*cols doubles
//
// The sidecar lives at "<path>.json" and stores caller-provided metadata
// (model configuration, seed). Neither file embeds wall-clock time or
// absolute paths, so identical runs produce byte-identical artifacts; the
// SHA-256 of the binary file doubles as the model's identity for the
// freeze contract during adapter training.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "glyrag/error.hpp"
#include "glyrag/hash.hpp"
#include "glyrag/nn.hpp"
#include "glyrag/tensor.hpp"

namespace glyrag::ckpt {

inline constexpr char kMagic[8] = {'G', 'L', 'Y', 'C', 'K', 'P', 'T', '1'};

namespace detail {

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw Error(ErrorKind::parse, "truncated checkpoint: missing u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f64s(std::ostream& out, const std::vector<double>& v) {
  static_assert(sizeof(double) == 8);
  // Little-endian host assumption, asserted at runtime once.
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_f64s(std::istream& in, std::vector<double>& v) {
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!in) throw Error(ErrorKind::parse, "truncated checkpoint: missing data");
}

inline void assert_little_endian() {
  const std::uint32_t probe = 1;
  unsigned char first;
  std::memcpy(&first, &probe, 1);
  if (first != 1)
    throw Error(ErrorKind::validation,
                "checkpoint format requires a little-endian host");
}

}  // namespace detail

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json meta;
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return path.string() + ".json";
}

// Serializes every parameter in registration order. `meta` is written to the
// JSON sidecar verbatim.
inline void save_checkpoint(const std::filesystem::path& path,
                            const ParamStore& params,
                            const nlohmann::json& meta) {
  detail::assert_little_endian();
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot open " + path.string());
  out.write(kMagic, sizeof(kMagic));
  detail::write_u64(out, params.items().size());
  for (const auto& [name, tensor] : params.items()) {
    detail::write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u64(out, tensor.rows());
    detail::write_u64(out, tensor.cols());
    detail::write_f64s(out, tensor.values());
  }
  out.close();
  if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());

  std::ofstream side(sidecar_path(path), std::ios::binary | std::ios::trunc);
  if (!side)
    throw Error(ErrorKind::io,
                "cannot open " + sidecar_path(path).string());
  side << meta.dump(2) << "\n";
  side.close();
  if (!side)
    throw Error(ErrorKind::io,
                "write failed for " + sidecar_path(path).string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  detail::assert_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(ErrorKind::missing_artifact,
                "checkpoint not found: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorKind::parse,
                "not a checkpoint file: " + path.string());
  Checkpoint ck;
  const std::uint64_t count = detail::read_u64(in);
  ck.tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t name_len = detail::read_u64(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!in)
      throw Error(ErrorKind::parse, "truncated checkpoint: missing name");
    const std::uint64_t rows = detail::read_u64(in);
    const std::uint64_t cols = detail::read_u64(in);
    Tensor t(rows, cols);
    detail::read_f64s(in, t.values());
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }

  std::ifstream side(sidecar_path(path), std::ios::binary);
  if (side) {
    try {
      side >> ck.meta;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::parse, "corrupt checkpoint sidecar " +
                                        sidecar_path(path).string() + ": " +
                                        e.what());
    }
  }
  return ck;
}

// Copies checkpoint values into an already-constructed parameter store. The
// store defines the expected names and shapes; anything missing, extra, or
// reshaped is an error so silently mismatched models cannot load.
inline void restore_into(const Checkpoint& ck, ParamStore& params) {
  if (ck.tensors.size() != params.items().size())
    throw Error(ErrorKind::validation,
                "checkpoint has " + std::to_string(ck.tensors.size()) +
                    " tensors, model expects " +
                    std::to_string(params.items().size()));
  for (const auto& [name, tensor] : ck.tensors) {
    if (!params.has(name))
      throw Error(ErrorKind::validation,
                  "checkpoint tensor has no matching parameter: " + name);
    Tensor dst = params.get(name);  // shares storage with the store
    if (dst.rows() != tensor.rows() || dst.cols() != tensor.cols())
      throw Error(ErrorKind::validation,
                  "shape mismatch for " + name + ": checkpoint " +
                      std::to_string(tensor.rows()) + "x" +
                      std::to_string(tensor.cols()) + ", model " +
                      std::to_string(dst.rows()) + "x" +
                      std::to_string(dst.cols()));
    dst.values() = tensor.values();
  }
}

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(ErrorKind::missing_artifact,
                "cannot hash missing file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return hash::sha256_hex(bytes);
}

// Canonical hash of a JSON document: nlohmann dump() emits sorted keys and
// minimal whitespace, so semantically equal configs hash identically.
inline std::string json_sha256(const nlohmann::json& j) {
  return hash::sha256_hex(j.dump());
}

}  // namespace glyrag::ckpt

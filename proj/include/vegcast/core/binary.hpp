#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vegcast/core/tensor.hpp"

namespace vegcast::io {

namespace fs = std::filesystem;

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

/// Writes raw little-endian float32 values.
inline void write_f32(const fs::path& path, const float* data, std::size_t count) {
  std::vector<std::uint32_t> buf(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, data + i, 4);
    buf[i] = to_little(bits);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(count * 4));
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

inline void write_f32(const fs::path& path, const Tensor<float>& t) { write_f32(path, t.data(), t.size()); }

/// Reads exactly `count` float32 values; `what` names the payload in errors.
inline std::vector<float> read_f32(const fs::path& path, std::size_t count, const std::string& what,
                                   std::size_t offset_values = 0, bool exact_size = true) {
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  if (ec) throw FormatError(what + ": missing payload file '" + path.string() + "'");
  const std::size_t need = (offset_values + count) * 4;
  if ((exact_size && bytes != need) || bytes < need)
    throw FormatError(what + ": payload '" + path.filename().string() + "' holds " + std::to_string(bytes) +
                      " bytes, expected " + std::to_string(need));
  std::ifstream in(path, std::ios::binary);
  in.seekg(static_cast<std::streamoff>(offset_values * 4));
  std::vector<std::uint32_t> buf(count);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * 4));
  if (!in) throw FormatError(what + ": short read from '" + path.string() + "'");
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = to_little(buf[i]);
    std::memcpy(&out[i], &bits, 4);
  }
  return out;
}

inline nlohmann::json read_json(const fs::path& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw FormatError(what + ": missing '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": corrupt JSON in '" + path.string() + "': " + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// 64-bit FNV-1a, rendered as 16 hex digits.
inline std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Hash of a JSON document's canonical (sorted-key, compact) serialization.
inline std::string config_hash(const nlohmann::json& j) { return fnv1a_hex(j.dump()); }

}  // namespace vegcast::io

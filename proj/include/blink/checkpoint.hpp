// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat binary tensor container.
//
//   bytes [0, 10)        magic "BLINKCKPT1"
//   bytes [10, 18)       header length N, unsigned 64-bit little-endian
//   bytes [18, 18 + N)   UTF-8 JSON header:
//                          {"format_version": 1,
//                           "meta": {...},
//                           "tensors": {name: {"dtype": "f32"|"f64",
//                                              "shape": [...],
//                                              "offset": o, "nbytes": n}}}
//   bytes [18 + N, ...)  tensor payloads, little-endian, row-major; offsets
//                        are relative to the start of this section.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace blink {

inline constexpr std::string_view kCheckpointMagic = "BLINKCKPT1";

enum class DType { F32, F64 };

struct TensorEntry {
  DType dtype = DType::F32;
  std::vector<std::int64_t> shape;
  std::vector<std::byte> bytes;  // little-endian payload

  std::int64_t element_count() const;
};

class TensorArchive {
 public:
  void put(const std::string& name, std::vector<std::int64_t> shape, std::span<const float> values);
  void put(const std::string& name, std::vector<std::int64_t> shape, std::span<const double> values);

  bool contains(const std::string& name) const { return tensors_.contains(name); }
  const TensorEntry& at(const std::string& name) const;

  // Reads a tensor converting to the requested precision. Throws ConfigError
  // if absent or if `expected_shape` is non-empty and differs.
  std::vector<float> get_f32(const std::string& name, const std::vector<std::int64_t>& expected_shape = {}) const;
  std::vector<double> get_f64(const std::string& name, const std::vector<std::int64_t>& expected_shape = {}) const;

  const std::map<std::string, TensorEntry>& tensors() const { return tensors_; }
  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

  // SHA-256 over tensor names, dtypes, shapes and payloads (metadata excluded).
  std::string digest() const;

 private:
  std::map<std::string, TensorEntry> tensors_;
  nlohmann::json meta_ = nlohmann::json::object();
};

// Incremental SHA-256, hex output.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t size);
  void update(std::string_view text) { update(text.data(), text.size()); }
  std::string hex_digest();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

// Little-endian scalar helpers used by the binary formats.
void append_le_u64(std::vector<std::byte>& out, std::uint64_t v);
std::uint64_t read_le_u64(const std::byte* p);
void append_le_f32(std::vector<std::byte>& out, float v);
float read_le_f32(const std::byte* p);

}  // namespace blink

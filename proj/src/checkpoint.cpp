// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include "blink/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "blink/errors.hpp"

namespace blink {

namespace {

template <typename U>
void append_le(std::vector<std::byte>& out, U bits) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::byte>((bits >> (8 * i)) & 0xFF));
}

template <typename U>
U read_le(const std::byte* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(std::to_integer<unsigned>(p[i])) << (8 * i);
  return v;
}

const char* dtype_name(DType t) { return t == DType::F32 ? "f32" : "f64"; }

std::size_t dtype_size(DType t) { return t == DType::F32 ? 4 : 8; }

std::int64_t shape_product(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto s : shape) {
    if (s < 0) throw InvalidArgument("tensor shape has a negative dimension");
    n *= s;
  }
  return n;
}

}  // namespace

void append_le_u64(std::vector<std::byte>& out, std::uint64_t v) { append_le<std::uint64_t>(out, v); }
std::uint64_t read_le_u64(const std::byte* p) { return read_le<std::uint64_t>(p); }
void append_le_f32(std::vector<std::byte>& out, float v) { append_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v)); }
float read_le_f32(const std::byte* p) { return std::bit_cast<float>(read_le<std::uint32_t>(p)); }

std::int64_t TensorEntry::element_count() const { return shape_product(shape); }

void TensorArchive::put(const std::string& name, std::vector<std::int64_t> shape, std::span<const float> values) {
  if (shape_product(shape) != static_cast<std::int64_t>(values.size())) {
    throw InvalidArgument("TensorArchive::put: shape does not match element count for " + name);
  }
  TensorEntry e{DType::F32, std::move(shape), {}};
  e.bytes.reserve(values.size() * 4);
  for (float v : values) append_le<std::uint32_t>(e.bytes, std::bit_cast<std::uint32_t>(v));
  tensors_[name] = std::move(e);
}

void TensorArchive::put(const std::string& name, std::vector<std::int64_t> shape, std::span<const double> values) {
  if (shape_product(shape) != static_cast<std::int64_t>(values.size())) {
    throw InvalidArgument("TensorArchive::put: shape does not match element count for " + name);
  }
  TensorEntry e{DType::F64, std::move(shape), {}};
  e.bytes.reserve(values.size() * 8);
  for (double v : values) append_le<std::uint64_t>(e.bytes, std::bit_cast<std::uint64_t>(v));
  tensors_[name] = std::move(e);
}

const TensorEntry& TensorArchive::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ConfigError("checkpoint has no tensor named '" + name + "'");
  return it->second;
}

namespace {

void check_shape(const std::string& name, const TensorEntry& e, const std::vector<std::int64_t>& expected) {
  if (!expected.empty() && e.shape != expected) {
    throw ConfigError("checkpoint tensor '" + name + "' has an unexpected shape");
  }
}

}  // namespace

std::vector<float> TensorArchive::get_f32(const std::string& name,
                                          const std::vector<std::int64_t>& expected_shape) const {
  const TensorEntry& e = at(name);
  check_shape(name, e, expected_shape);
  const std::size_t n = static_cast<std::size_t>(e.element_count());
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = e.dtype == DType::F32 ? std::bit_cast<float>(read_le<std::uint32_t>(e.bytes.data() + 4 * i))
                                   : static_cast<float>(std::bit_cast<double>(read_le<std::uint64_t>(e.bytes.data() + 8 * i)));
  }
  return out;
}

std::vector<double> TensorArchive::get_f64(const std::string& name,
                                           const std::vector<std::int64_t>& expected_shape) const {
  const TensorEntry& e = at(name);
  check_shape(name, e, expected_shape);
  const std::size_t n = static_cast<std::size_t>(e.element_count());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = e.dtype == DType::F64 ? std::bit_cast<double>(read_le<std::uint64_t>(e.bytes.data() + 8 * i))
                                   : static_cast<double>(std::bit_cast<float>(read_le<std::uint32_t>(e.bytes.data() + 4 * i)));
  }
  return out;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format_version"] = 1;
  header["meta"] = meta_;
  nlohmann::json tensors = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, e] : tensors_) {
    tensors[name] = {{"dtype", dtype_name(e.dtype)}, {"shape", e.shape}, {"offset", offset}, {"nbytes", e.bytes.size()}};
    offset += e.bytes.size();
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::vector<std::byte> prefix;
  for (char c : kCheckpointMagic) prefix.push_back(static_cast<std::byte>(c));
  append_le<std::uint64_t>(prefix, text.size());

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open checkpoint for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(prefix.data()), static_cast<std::streamsize>(prefix.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, e] : tensors_) {
      out.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    }
    if (!out) throw ConfigError("failed writing checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path.string());
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t prefix = kCheckpointMagic.size() + 8;
  if (raw.size() < prefix) throw FormatError("checkpoint truncated before header", raw.size());
  if (std::string_view(raw.data(), kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError("bad checkpoint magic", 0);
  }
  const auto* bytes = reinterpret_cast<const std::byte*>(raw.data());
  const std::uint64_t header_len = read_le<std::uint64_t>(bytes + kCheckpointMagic.size());
  if (header_len > raw.size() - prefix) throw FormatError("checkpoint header length exceeds file size", kCheckpointMagic.size());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.begin() + static_cast<std::ptrdiff_t>(prefix),
                                   raw.begin() + static_cast<std::ptrdiff_t>(prefix + header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what(), prefix + e.byte);
  }
  if (!header.contains("format_version") || header["format_version"] != 1) {
    throw FormatError("unsupported checkpoint format version", prefix);
  }
  const std::uint64_t data_start = prefix + header_len;
  const std::uint64_t data_len = raw.size() - data_start;

  TensorArchive archive;
  if (header.contains("meta")) archive.meta_ = header["meta"];
  try {
    for (const auto& [name, info] : header.at("tensors").items()) {
      TensorEntry e;
      const std::string dt = info.at("dtype").get<std::string>();
      if (dt == "f32") {
        e.dtype = DType::F32;
      } else if (dt == "f64") {
        e.dtype = DType::F64;
      } else {
        throw FormatError("unknown dtype '" + dt + "' for tensor " + name, prefix);
      }
      e.shape = info.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = info.at("offset").get<std::uint64_t>();
      const auto nbytes = info.at("nbytes").get<std::uint64_t>();
      if (nbytes != static_cast<std::uint64_t>(shape_product(e.shape)) * dtype_size(e.dtype)) {
        throw FormatError("tensor " + name + " byte count disagrees with its shape", prefix);
      }
      if (offset > data_len || nbytes > data_len - offset) {
        throw FormatError("tensor " + name + " payload extends past end of file", data_start + offset);
      }
      e.bytes.assign(bytes + data_start + offset, bytes + data_start + offset + nbytes);
      archive.tensors_[name] = std::move(e);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what(), prefix);
  }
  return archive;
}

std::string TensorArchive::digest() const {
  Sha256 h;
  for (const auto& [name, e] : tensors_) {
    h.update(name);
    h.update(dtype_name(e.dtype));
    for (auto s : e.shape) h.update(&s, sizeof(s));
    h.update(e.bytes.data(), e.bytes.size());
  }
  return h.hex_digest();
}

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
  if (!ctx_ || EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 initialisation failed");
  }
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(const void* data, std::size_t size) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, size);
}

std::string Sha256::hex_digest() {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), md, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::string sha256_hex(std::string_view text) {
  Sha256 h;
  h.update(text);
  return h.hex_digest();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file for hashing: " + path.string());
  Sha256 h;
  std::vector<char> chunk(1 << 16);
  while (in) {
    in.read(chunk.data(), static_cast<std::streamsize>(chunk.size()));
    h.update(chunk.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex_digest();
}

}  // namespace blink

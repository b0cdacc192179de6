#pragma once

// EMB1 embedding archives.
//
// Layout, all integers little-endian:
//   "EMB1"            4 ASCII bytes
//   u32 dimension
//   u32 record count
//   per record:
//     u32 label length, label bytes (UTF-8)
//     u32 key length,   key bytes (UTF-8)
//     dimension x float32
//
// Vectors are L2-normalized when read, never when written.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "descevo/error.hpp"
#include "descevo/types.hpp"

namespace descevo {

using Embedding = std::vector<float>;

struct LabeledEmbedding {
  ClassLabel label;  // ground truth for images, owning class for text prompts
  std::string key;   // image id or rendered prompt
  Embedding vector;

  friend bool operator==(const LabeledEmbedding&, const LabeledEmbedding&) = default;
};

struct EmbeddingArchive {
  std::uint32_t dimension = 0;
  std::vector<LabeledEmbedding> records;

  friend bool operator==(const EmbeddingArchive&, const EmbeddingArchive&) = default;
};

inline constexpr char kArchiveMagic[4] = {'E', 'M', 'B', '1'};

// Vectors whose norm is this close to 1 are left untouched on load, so that
// normalizing an already-normalized float32 vector is the identity.
inline constexpr double kUnitNormSlack = 1e-6;

inline double l2_norm(std::span<const float> v) noexcept {
  double sum = 0.0;
  for (float x : v) sum += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(sum);
}

/// Normalizes `v` in place. Throws DataError naming `key` for zero or non-finite vectors.
inline void normalize_embedding(Embedding& v, std::string_view key) {
  for (float x : v) {
    if (!std::isfinite(x)) throw DataError("non-finite component in vector for \"" + std::string(key) + "\"");
  }
  const double norm = l2_norm(v);
  if (norm == 0.0) throw DataError("zero-norm vector for \"" + std::string(key) + "\"");
  if (std::abs(norm - 1.0) <= kUnitNormSlack) return;
  for (float& x : v) x = static_cast<float>(static_cast<double>(x) / norm);
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string_view source) : bytes_(bytes), source_(source) {}

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  std::uint32_t u32(std::string_view what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::string_view take(std::size_t n, std::string_view what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw CorruptionError(std::string(source_) + ": truncated while reading " + std::string(what));
    }
  }

  std::string_view bytes_;
  std::string_view source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Decodes an archive from memory. `source` only labels error messages.
inline EmbeddingArchive parse_archive(std::string_view bytes, std::string_view source = "archive") {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kArchiveMagic, 4) != 0) {
    throw FormatError(std::string(source) + ": missing EMB1 magic");
  }
  detail::ByteReader in(bytes.substr(4), source);
  EmbeddingArchive archive;
  archive.dimension = in.u32("header dimension");
  const std::uint32_t count = in.u32("header record count");
  if (archive.dimension == 0) throw FormatError(std::string(source) + ": dimension is zero");

  archive.records.reserve(std::min<std::size_t>(count, in.remaining() / (4u * archive.dimension + 8u) + 1));
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::string what = "record " + std::to_string(r);
    const auto label_len = in.u32(what + " label length");
    std::string label(in.take(label_len, what + " label"));
    const auto key_len = in.u32(what + " key length");
    std::string key(in.take(key_len, what + " key"));
    const auto raw = in.take(std::size_t{4} * archive.dimension, what + " vector");
    Embedding v(archive.dimension);
    for (std::uint32_t i = 0; i < archive.dimension; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) {
        u |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[4 * i + b])) << (8 * b);
      }
      v[i] = std::bit_cast<float>(u);
    }
    normalize_embedding(v, key);
    if (strings::trim(label).empty()) {
      throw DataError(std::string(source) + ": empty label for \"" + key + "\"");
    }
    archive.records.push_back({ClassLabel(std::move(label)), std::move(key), std::move(v)});
  }
  if (in.remaining() != 0) {
    throw CorruptionError(std::string(source) + ": " + std::to_string(in.remaining()) +
                          " trailing bytes after the last record");
  }
  return archive;
}

/// Encodes an archive. Every record must match `archive.dimension`.
inline std::string serialize_archive(const EmbeddingArchive& archive) {
  if (archive.dimension == 0) throw PreconditionError("archive dimension must be positive");
  for (const auto& r : archive.records) {
    if (r.vector.size() != archive.dimension) {
      throw PreconditionError("record \"" + r.key + "\" has dimension " + std::to_string(r.vector.size()) +
                              ", archive has " + std::to_string(archive.dimension));
    }
  }
  std::string out(kArchiveMagic, 4);
  detail::put_u32(out, archive.dimension);
  detail::put_u32(out, static_cast<std::uint32_t>(archive.records.size()));
  for (const auto& r : archive.records) {
    detail::put_u32(out, static_cast<std::uint32_t>(r.label.str().size()));
    out += r.label.str();
    detail::put_u32(out, static_cast<std::uint32_t>(r.key.size()));
    out += r.key;
    for (float x : r.vector) detail::put_u32(out, std::bit_cast<std::uint32_t>(x));
  }
  return out;
}

inline EmbeddingArchive read_archive(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("archive not found: " + path.string());
  return parse_archive(read_text_file(path), path.string());
}

inline void write_archive(const EmbeddingArchive& archive, const std::filesystem::path& path) {
  write_text_file(path, serialize_archive(archive));
}

}  // namespace descevo

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recap/binary_io.hpp"
#include "recap/checksum.hpp"
#include "recap/error.hpp"

namespace recap {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Modality : std::uint8_t { image = 0, text = 1 };

inline const char* to_string(Modality m) { return m == Modality::image ? "image" : "text"; }

/// Cosine similarity; zero when either vector has zero norm.
template <typename A, typename B>
double cosine(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

inline void require_finite(const Eigen::Ref<const Vector>& v, const std::string& what) {
  if (!v.allFinite()) throw ValidationError(what + ": non-finite value");
}

/// n x d embeddings with unique row ids and a modality tag.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix(std::vector<std::string> ids, RowMatrix data, Modality modality)
      : ids_(std::move(ids)), data_(std::move(data)), modality_(modality) {
    if (data_.rows() == 0 || data_.cols() == 0) {
      throw ValidationError("embedding matrix must have n >= 1 rows and d >= 1 columns");
    }
    if (static_cast<Eigen::Index>(ids_.size()) != data_.rows()) {
      throw ValidationError("embedding matrix has " + std::to_string(data_.rows()) + " rows but " +
                            std::to_string(ids_.size()) + " ids");
    }
    index_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!index_.emplace(ids_[i], i).second) throw ValidationError("duplicate id '" + ids_[i] + "'");
    }
    for (Eigen::Index r = 0; r < data_.rows(); ++r) {
      if (!data_.row(r).allFinite()) {
        throw ValidationError("non-finite value in row " + std::to_string(r) + " ('" + ids_[r] + "')");
      }
    }
  }

  const std::vector<std::string>& ids() const { return ids_; }
  const RowMatrix& data() const { return data_; }
  Modality modality() const { return modality_; }
  std::size_t rows() const { return static_cast<std::size_t>(data_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(data_.cols()); }

  auto row(std::size_t i) const { return data_.row(static_cast<Eigen::Index>(i)); }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Moves the payload out, leaving this matrix unusable.
  std::pair<std::vector<std::string>, RowMatrix> release() && { return {std::move(ids_), std::move(data_)}; }

  friend bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
    return a.modality_ == b.modality_ && a.ids_ == b.ids_ && a.data_.rows() == b.data_.rows() &&
           a.data_.cols() == b.data_.cols() && a.data_ == b.data_;
  }

 private:
  std::vector<std::string> ids_;
  RowMatrix data_;
  Modality modality_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Selects rows by index, producing a new matrix. Ids are suffixed with '#k' when
/// a row is selected more than once so the result keeps unique ids.
inline EmbeddingMatrix gather_rows(const EmbeddingMatrix& m, std::span<const std::size_t> rows) {
  RowMatrix data(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m.dim()));
  std::vector<std::string> ids;
  ids.reserve(rows.size());
  std::unordered_map<std::size_t, std::size_t> seen;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m.rows()) throw ValidationError("row index out of range");
    data.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
    const std::size_t count = seen[rows[i]]++;
    ids.push_back(count == 0 ? m.ids()[rows[i]] : m.ids()[rows[i]] + "#" + std::to_string(count));
  }
  return {std::move(ids), std::move(data), m.modality()};
}

/// Rounds every value to the nearest f32, the precision carried by interchange files.
inline void round_to_f32(Eigen::Ref<RowMatrix> m) {
  m = m.cast<float>().cast<double>();
}

// EMBX interchange file:
//   "EMBX" | version u32 | dtype u8 (0 = f32) | modality u8 | d u32 | count u64
//   | count x (u16 len, utf-8 id) | count*d f32 row-major | crc32(f32 block) u32
// All integers and floats little-endian.
namespace embx {

inline constexpr char magic[4] = {'E', 'M', 'B', 'X'};
inline constexpr std::uint32_t version = 1;
inline constexpr std::uint8_t dtype_f32 = 0;

inline std::vector<std::byte> encode(const EmbeddingMatrix& m) {
  const std::size_t n = m.rows();
  const std::size_t d = m.dim();
  if (d > std::numeric_limits<std::uint32_t>::max()) throw ValidationError("EMBX: d too large");
  ByteWriter w;
  w.reserve(32 + n * (d * 4 + 16));
  w.raw(std::string_view(magic, 4));
  w.u32(version);
  w.u8(dtype_f32);
  w.u8(static_cast<std::uint8_t>(m.modality()));
  w.u32(static_cast<std::uint32_t>(d));
  w.u64(n);
  for (const auto& id : m.ids()) {
    if (id.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ValidationError("EMBX: id longer than 65535 bytes");
    }
    w.u16(static_cast<std::uint16_t>(id.size()));
    w.raw(id);
  }
  const std::size_t payload_begin = w.size();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      const float v = static_cast<float>(m.data()(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
      if (!std::isfinite(v)) {
        throw ValidationError("EMBX: value in row " + std::to_string(r) + " does not fit in f32");
      }
      w.f32(v);
    }
  }
  w.u32(crc32(w.bytes().subspan(payload_begin)));
  return std::move(w).take();
}

inline EmbeddingMatrix decode(std::span<const std::byte> bytes) {
  ByteReader r(bytes, "EMBX");
  if (r.str(4) != std::string_view(magic, 4)) throw FormatError("EMBX: bad magic");
  if (const auto v = r.u32(); v != version) throw FormatError("EMBX: unsupported version " + std::to_string(v));
  if (const auto t = r.u8(); t != dtype_f32) throw FormatError("EMBX: unsupported dtype " + std::to_string(t));
  const auto modality_code = r.u8();
  if (modality_code > 1) throw FormatError("EMBX: bad modality code " + std::to_string(modality_code));
  const std::size_t d = r.u32();
  const std::uint64_t n = r.u64();
  if (d == 0 || n == 0) throw FormatError("EMBX: empty matrix");
  // Every row needs at least 2 id bytes plus 4*d payload bytes.
  if (n > r.remaining() / (2 + 4 * d)) throw FormatError("EMBX: declared count exceeds file size");
  std::vector<std::string> ids;
  ids.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) ids.push_back(r.str(r.u16()));
  const std::size_t payload_size = n * d * 4;
  if (r.remaining() != payload_size + 4) {
    throw FormatError("EMBX: payload size " + std::to_string(r.remaining()) + " does not match count*d (" +
                      std::to_string(payload_size + 4) + ")");
  }
  const auto payload = r.take(payload_size);
  const std::uint32_t expected = r.u32();
  if (crc32(payload) != expected) throw FormatError("EMBX: CRC mismatch");
  ByteReader p(payload, "EMBX payload");
  RowMatrix data(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.cols(); ++j) data(i, j) = static_cast<double>(p.f32());
  }
  return {std::move(ids), std::move(data), static_cast<Modality>(modality_code)};
}

inline void save(const std::filesystem::path& path, const EmbeddingMatrix& m) { write_file_bytes(path, encode(m)); }

inline EmbeddingMatrix load(const std::filesystem::path& path) {
  try {
    return decode(read_file_bytes(path));
  } catch (const Error& e) {
    rethrow_labeled(e, path.string());
  }
}

}  // namespace embx
}  // namespace recap

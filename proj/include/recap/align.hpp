#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "recap/binary_io.hpp"
#include "recap/checksum.hpp"
#include "recap/embedding.hpp"
#include "recap/error.hpp"

namespace recap {

enum class Scheme : std::uint8_t { none = 0, normalize_center_renormalize = 1 };
enum class MapKind : std::uint8_t { identity = 0, procrustes = 1, ols = 2 };
enum class FitMethod { procrustes, ols };

inline const char* to_string(Scheme s) { return s == Scheme::none ? "none" : "center"; }

inline const char* to_string(MapKind k) {
  switch (k) {
    case MapKind::identity:
      return "identity";
    case MapKind::procrustes:
      return "procrustes";
    case MapKind::ols:
      return "ols";
  }
  return "?";
}

inline Scheme parse_scheme(std::string_view s) {
  if (s == "none") return Scheme::none;
  if (s == "center" || s == "normalize_center_renormalize") return Scheme::normalize_center_renormalize;
  throw ValidationError("unknown preprocessing scheme '" + std::string(s) + "' (expected none|center)");
}

inline FitMethod parse_fit_method(std::string_view s) {
  if (s == "procrustes") return FitMethod::procrustes;
  if (s == "ols") return FitMethod::ols;
  throw ValidationError("unknown fit method '" + std::string(s) + "' (expected procrustes|ols)");
}

/// Per-modality centering statistics. With Scheme::none both means are zero and
/// applying the preprocessor is the identity.
struct Preprocessor {
  Vector image_mean;
  Vector text_mean;
  Scheme scheme = Scheme::none;

  static Preprocessor identity(std::size_t d) {
    return {Vector::Zero(static_cast<Eigen::Index>(d)), Vector::Zero(static_cast<Eigen::Index>(d)), Scheme::none};
  }

  std::size_t dim() const { return static_cast<std::size_t>(image_mean.size()); }
  const Vector& mean_for(Modality m) const { return m == Modality::image ? image_mean : text_mean; }

  friend bool operator==(const Preprocessor& a, const Preprocessor& b) {
    return a.scheme == b.scheme && a.image_mean.size() == b.image_mean.size() &&
           a.text_mean.size() == b.text_mean.size() && a.image_mean == b.image_mean && a.text_mean == b.text_mean;
  }
};

namespace detail {

inline void check_same_dim(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  if (a.dim() != b.dim()) {
    throw ValidationError("dimension mismatch: " + std::string(to_string(a.modality())) + " d=" +
                          std::to_string(a.dim()) + " vs " + to_string(b.modality()) + " d=" +
                          std::to_string(b.dim()));
  }
}

inline void check_paired(const EmbeddingMatrix& texts, const EmbeddingMatrix& images) {
  check_same_dim(texts, images);
  if (texts.rows() != images.rows()) {
    throw ValidationError("paired matrices differ in row count: texts n=" + std::to_string(texts.rows()) +
                          " vs images n=" + std::to_string(images.rows()));
  }
}

inline Vector normalized_mean(const EmbeddingMatrix& m) {
  Vector sum = Vector::Zero(static_cast<Eigen::Index>(m.dim()));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double norm = m.row(i).norm();
    if (norm == 0.0) {
      throw ValidationError(std::string(to_string(m.modality())) + " row " + std::to_string(i) + " ('" +
                            m.ids()[i] + "') has zero norm");
    }
    sum += m.row(i).transpose() / norm;
  }
  return sum / static_cast<double>(m.rows());
}

/// Normalize, subtract `mean`, renormalize every row in place.
inline void center_rows(Eigen::Ref<RowMatrix> rows, const Vector& mean) {
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    auto row = rows.row(i);
    const double norm = row.norm();
    if (norm == 0.0) throw ValidationError("row " + std::to_string(i) + " has zero norm");
    row /= norm;
    row -= mean.transpose();
    const double centered = row.norm();
    if (centered == 0.0) throw ValidationError("row " + std::to_string(i) + " has zero norm after centering");
    row /= centered;
  }
}

}  // namespace detail

/// Fits centering statistics on paired training matrices.
inline Preprocessor preprocess_fit(const EmbeddingMatrix& images, const EmbeddingMatrix& texts, Scheme scheme) {
  detail::check_same_dim(images, texts);
  if (scheme == Scheme::none) return Preprocessor::identity(images.dim());
  return {detail::normalized_mean(images), detail::normalized_mean(texts), scheme};
}

inline EmbeddingMatrix preprocess_apply(const Preprocessor& p, EmbeddingMatrix&& rows) {
  if (rows.dim() != p.dim()) {
    throw ValidationError("dimension mismatch: preprocessor d=" + std::to_string(p.dim()) + " vs rows d=" +
                          std::to_string(rows.dim()));
  }
  if (p.scheme == Scheme::none) return std::move(rows);
  const Modality modality = rows.modality();
  auto [ids, data] = std::move(rows).release();
  detail::center_rows(data, p.mean_for(modality));
  return {std::move(ids), std::move(data), modality};
}

inline EmbeddingMatrix preprocess_apply(const Preprocessor& p, const EmbeddingMatrix& rows) {
  return preprocess_apply(p, EmbeddingMatrix(rows));
}

inline Vector preprocess_vector(const Preprocessor& p, const Eigen::Ref<const Vector>& v, Modality modality) {
  if (static_cast<std::size_t>(v.size()) != p.dim()) {
    throw ValidationError("dimension mismatch: expected d=" + std::to_string(p.dim()) + ", got " +
                          std::to_string(v.size()));
  }
  require_finite(v, std::string(to_string(modality)) + " vector");
  Vector out = v;
  if (p.scheme == Scheme::none) return out;
  Eigen::Map<RowMatrix> as_row(out.data(), 1, out.size());
  detail::center_rows(as_row, p.mean_for(modality));
  return out;
}

/// d x d linear map taking (preprocessed) image embeddings into the text space.
struct AlignmentMap {
  MapKind kind = MapKind::identity;
  Eigen::MatrixXd weights;
  Preprocessor preprocessor;
  std::string fitted_on;

  std::size_t dim() const { return static_cast<std::size_t>(weights.rows()); }
};

inline AlignmentMap identity_map(std::size_t d, std::optional<Preprocessor> p = std::nullopt) {
  const auto n = static_cast<Eigen::Index>(d);
  return {MapKind::identity, Eigen::MatrixXd::Identity(n, n), p ? *p : Preprocessor::identity(d), "identity"};
}

/// max_ij |(W^T W - I)_ij|
inline double orthogonality_error(const Eigen::MatrixXd& w) {
  return (w.transpose() * w - Eigen::MatrixXd::Identity(w.cols(), w.cols())).cwiseAbs().maxCoeff();
}

/// Checks the structural invariants of a map; throws ValidationError.
inline void validate(const AlignmentMap& m) {
  const auto d = m.weights.rows();
  if (d == 0 || m.weights.cols() != d) throw ValidationError("alignment map must be square and non-empty");
  if (m.preprocessor.image_mean.size() != d || m.preprocessor.text_mean.size() != d) {
    throw ValidationError("alignment map preprocessor dimension does not match W");
  }
  if (!m.weights.allFinite() || !m.preprocessor.image_mean.allFinite() || !m.preprocessor.text_mean.allFinite()) {
    throw ValidationError("alignment map has non-finite entries");
  }
  if (m.kind == MapKind::identity && m.weights != Eigen::MatrixXd::Identity(d, d)) {
    throw ValidationError("identity map with non-identity weights");
  }
  if (m.kind == MapKind::procrustes && orthogonality_error(m.weights) > 1e-6) {
    throw ValidationError("procrustes map is not orthogonal");
  }
}

/// Orthogonal W minimizing sum_i ||W f_i - e_i||^2 over paired, preprocessed rows
/// (texts E, images F). With E^T F = U S V^T the optimum is W = U V^T.
inline AlignmentMap fit_procrustes(const EmbeddingMatrix& texts, const EmbeddingMatrix& images,
                                   std::optional<Preprocessor> p = std::nullopt, std::string fitted_on = {}) {
  detail::check_paired(texts, images);
  const Eigen::MatrixXd cross = texts.data().transpose() * images.data();
  if (!cross.allFinite()) throw NumericalError("cross-covariance is not finite");
  Eigen::BDCSVD<Eigen::MatrixXd> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  if (svd.info() != Eigen::Success) throw NumericalError("SVD of cross-covariance did not converge");
  Eigen::MatrixXd w = svd.matrixU() * svd.matrixV().transpose();
  if (!w.allFinite() || orthogonality_error(w) > 1e-6) {
    throw NumericalError("SVD produced a non-orthogonal procrustes solution");
  }
  return {MapKind::procrustes, std::move(w), p ? std::move(*p) : Preprocessor::identity(texts.dim()),
          std::move(fitted_on)};
}

/// Unconstrained least squares W, solved as F W^T = E through an SVD pseudoinverse
/// (singular values below 1e-10 * sigma_max are treated as zero). Tall inputs are
/// first reduced with a Householder QR so the SVD stays d x d.
inline AlignmentMap fit_ols(const EmbeddingMatrix& texts, const EmbeddingMatrix& images,
                            std::optional<Preprocessor> p = std::nullopt, std::string fitted_on = {}) {
  detail::check_paired(texts, images);
  const Eigen::Index n = images.data().rows();
  const Eigen::Index d = images.data().cols();

  Eigen::MatrixXd system;  // reduced coefficient matrix
  Eigen::MatrixXd rhs;     // matching right-hand side
  if (n > d) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(images.data());
    system = qr.matrixQR().topRows(d).triangularView<Eigen::Upper>();
    Eigen::MatrixXd qt_e = texts.data();
    qt_e.applyOnTheLeft(qr.householderQ().adjoint());
    rhs = qt_e.topRows(d);
  } else {
    system = images.data();
    rhs = texts.data();
  }
  if (!system.allFinite() || !rhs.allFinite()) throw NumericalError("least-squares system is not finite");

  Eigen::BDCSVD<Eigen::MatrixXd> svd(system, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw NumericalError("SVD of image matrix did not converge");
  const Vector& sigma = svd.singularValues();
  const double cutoff = sigma.size() > 0 ? 1e-10 * sigma(0) : 0.0;
  Vector inv = Vector::Zero(sigma.size());
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (sigma(i) > cutoff) inv(i) = 1.0 / sigma(i);
  }
  const Eigen::MatrixXd w_t = svd.matrixV() * inv.asDiagonal() * (svd.matrixU().transpose() * rhs);
  Eigen::MatrixXd w = w_t.transpose();
  if (!w.allFinite()) throw NumericalError("least-squares solution is not finite");
  return {MapKind::ols, std::move(w), p ? std::move(*p) : Preprocessor::identity(texts.dim()), std::move(fitted_on)};
}

/// Fits the preprocessor on the paired rows, then the map on the preprocessed rows.
/// This overload preprocesses the inputs in place.
inline AlignmentMap fit_alignment(EmbeddingMatrix&& images, EmbeddingMatrix&& texts, FitMethod method, Scheme scheme,
                                  std::string fitted_on = {}) {
  detail::check_paired(texts, images);
  Preprocessor p = preprocess_fit(images, texts, scheme);
  const EmbeddingMatrix f = preprocess_apply(p, std::move(images));
  const EmbeddingMatrix e = preprocess_apply(p, std::move(texts));
  return method == FitMethod::procrustes ? fit_procrustes(e, f, std::move(p), std::move(fitted_on))
                                         : fit_ols(e, f, std::move(p), std::move(fitted_on));
}

inline AlignmentMap fit_alignment(const EmbeddingMatrix& images, const EmbeddingMatrix& texts, FitMethod method,
                                  Scheme scheme, std::string fitted_on = {}) {
  return fit_alignment(EmbeddingMatrix(images), EmbeddingMatrix(texts), method, scheme, std::move(fitted_on));
}

/// W * preprocess(v) for a raw image embedding v.
inline Vector apply_map(const AlignmentMap& m, const Eigen::Ref<const Vector>& v) {
  if (static_cast<std::size_t>(v.size()) != m.dim()) {
    throw ValidationError("dimension mismatch: map d=" + std::to_string(m.dim()) + ", vector d=" +
                          std::to_string(v.size()));
  }
  return m.weights * preprocess_vector(m.preprocessor, v, Modality::image);
}

/// Preprocesses and maps every row of a raw image matrix.
inline EmbeddingMatrix apply_map(const AlignmentMap& m, const EmbeddingMatrix& images) {
  EmbeddingMatrix pre = preprocess_apply(m.preprocessor, images);
  auto [ids, data] = std::move(pre).release();
  RowMatrix mapped = data * m.weights.transpose();
  return {std::move(ids), std::move(mapped), Modality::image};
}

struct ObjectiveValues {
  double cosine_sum = 0.0;
  double residual_sum = 0.0;
};

/// sum_i cos(e_i, W f_i) and sum_i ||W f_i - e_i||^2 over already-preprocessed pairs.
inline ObjectiveValues objective_values(const AlignmentMap& m, const EmbeddingMatrix& texts,
                                        const EmbeddingMatrix& images) {
  detail::check_paired(texts, images);
  if (texts.dim() != m.dim()) throw ValidationError("dimension mismatch between map and data");
  ObjectiveValues out;
  for (std::size_t i = 0; i < texts.rows(); ++i) {
    const Vector mapped = m.weights * images.row(i).transpose();
    const auto e = texts.row(i).transpose();
    out.cosine_sum += cosine(e, mapped);
    out.residual_sum += (mapped - e).squaredNorm();
  }
  return out;
}

// ALNW map file:
//   "ALNW" | version u32 | kind u8 | scheme u8 | d u32 | image_mean d*f64 | text_mean d*f64
//   | W d*d f64 row-major | crc32 u32 over all preceding bytes. Little-endian throughout.
namespace alnw {

inline constexpr char magic[4] = {'A', 'L', 'N', 'W'};
inline constexpr std::uint32_t version = 1;

inline std::vector<std::byte> encode(const AlignmentMap& m) {
  validate(m);
  const auto d = static_cast<Eigen::Index>(m.dim());
  ByteWriter w;
  w.reserve(18 + 8 * static_cast<std::size_t>(d * (d + 2)) + 4);
  w.raw(std::string_view(magic, 4));
  w.u32(version);
  w.u8(static_cast<std::uint8_t>(m.kind));
  w.u8(static_cast<std::uint8_t>(m.preprocessor.scheme));
  w.u32(static_cast<std::uint32_t>(d));
  for (Eigen::Index i = 0; i < d; ++i) w.f64(m.preprocessor.image_mean(i));
  for (Eigen::Index i = 0; i < d; ++i) w.f64(m.preprocessor.text_mean(i));
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = 0; c < d; ++c) w.f64(m.weights(r, c));
  }
  w.u32(crc32(w.bytes()));
  return std::move(w).take();
}

inline AlignmentMap decode(std::span<const std::byte> bytes) {
  if (bytes.size() < 4) throw FormatError("ALNW: truncated");
  ByteReader r(bytes, "ALNW");
  if (r.str(4) != std::string_view(magic, 4)) throw FormatError("ALNW: bad magic");
  if (const auto v = r.u32(); v != version) throw FormatError("ALNW: unsupported version " + std::to_string(v));
  const auto kind = r.u8();
  const auto scheme = r.u8();
  if (kind > 2) throw FormatError("ALNW: bad kind " + std::to_string(kind));
  if (scheme > 1) throw FormatError("ALNW: bad scheme " + std::to_string(scheme));
  const std::size_t d = r.u32();
  if (d == 0) throw FormatError("ALNW: d = 0");
  const std::size_t expected = 8 * d * (d + 2) + 4;
  if (r.remaining() != expected) throw FormatError("ALNW: truncated or oversized payload");
  const std::uint32_t stored = ByteReader(bytes.subspan(bytes.size() - 4), "ALNW").u32();
  if (crc32(bytes.first(bytes.size() - 4)) != stored) throw FormatError("ALNW: CRC mismatch");

  const auto n = static_cast<Eigen::Index>(d);
  AlignmentMap m;
  m.kind = static_cast<MapKind>(kind);
  m.preprocessor.scheme = static_cast<Scheme>(scheme);
  m.preprocessor.image_mean.resize(n);
  m.preprocessor.text_mean.resize(n);
  m.weights.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) m.preprocessor.image_mean(i) = r.f64();
  for (Eigen::Index i = 0; i < n; ++i) m.preprocessor.text_mean(i) = r.f64();
  for (Eigen::Index row = 0; row < n; ++row) {
    for (Eigen::Index c = 0; c < n; ++c) m.weights(row, c) = r.f64();
  }
  validate(m);
  return m;
}

inline void save(const std::filesystem::path& path, const AlignmentMap& m) { write_file_bytes(path, encode(m)); }

inline AlignmentMap load(const std::filesystem::path& path) {
  try {
    return decode(read_file_bytes(path));
  } catch (const Error& e) {
    rethrow_labeled(e, path.string());
  }
}

}  // namespace alnw

/// Content hash of the serialized map.
inline std::string fingerprint(const AlignmentMap& m) { return sha256_hex(alnw::encode(m)); }

}  // namespace recap

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recap/binary_io.hpp"
#include "recap/checksum.hpp"
#include "recap/embedding.hpp"
#include "recap/error.hpp"

namespace recap {

enum class Provenance : std::uint8_t { human = 0, synthetic = 1 };

inline const char* to_string(Provenance p) { return p == Provenance::human ? "human" : "synthetic"; }

inline Provenance parse_provenance(std::string_view s) {
  if (s == "human") return Provenance::human;
  if (s == "synthetic") return Provenance::synthetic;
  throw FormatError("unknown provenance '" + std::string(s) + "'");
}

struct CaptionRecord {
  std::string caption_id;
  std::string text;
  Vector embedding;  // preprocessed text embedding
  Provenance provenance = Provenance::human;
  std::uint32_t dal_iteration = 0;
  std::optional<std::string> source_image_id;

  friend bool operator==(const CaptionRecord& a, const CaptionRecord& b) {
    return a.caption_id == b.caption_id && a.text == b.text && a.provenance == b.provenance &&
           a.dal_iteration == b.dal_iteration && a.source_image_id == b.source_image_id &&
           a.embedding.size() == b.embedding.size() && a.embedding == b.embedding;
  }
};

/// Score and threshold a synthetic caption was admitted with.
struct AuditEntry {
  double score = 0.0;
  double threshold = 0.0;
  std::string metric;

  friend bool operator==(const AuditEntry&, const AuditEntry&) = default;
};

struct StoreManifest {
  std::string dataset_tag;
  std::string map_fingerprint;
  std::size_t d = 0;
  std::size_t human_count = 0;
  std::size_t synthetic_count = 0;

  friend bool operator==(const StoreManifest&, const StoreManifest&) = default;
};

struct Neighbor {
  std::size_t index = 0;
  double score = 0.0;
};

/// Caption datastore with exact cosine top-k retrieval. Embeddings are stored
/// unit-normalized at f32 precision so persistence round-trips bit-exactly.
class Datastore {
 public:
  static Datastore build(std::vector<CaptionRecord> records, std::string dataset_tag = {},
                         std::string map_fingerprint = {}) {
    if (records.empty()) throw ValidationError("cannot build a datastore from zero records");
    Datastore s;
    s.manifest_.dataset_tag = std::move(dataset_tag);
    s.manifest_.map_fingerprint = std::move(map_fingerprint);
    s.manifest_.d = static_cast<std::size_t>(records.front().embedding.size());
    if (s.manifest_.d == 0) throw ValidationError("record embeddings must have d >= 1");
    s.records_.reserve(records.size());
    for (auto& r : records) s.insert(std::move(r), /*normalize=*/true);
    return s;
  }

  /// Appends one synthetic record, producing a new store version.
  Datastore add_synthetic(CaptionRecord rec, std::optional<AuditEntry> audit = std::nullopt) const& {
    Datastore copy = *this;
    return std::move(copy).add_synthetic(std::move(rec), std::move(audit));
  }

  Datastore add_synthetic(CaptionRecord rec, std::optional<AuditEntry> audit = std::nullopt) && {
    if (rec.provenance != Provenance::synthetic) {
      throw ValidationError("add_synthetic: record '" + rec.caption_id + "' is not synthetic");
    }
    std::string id = rec.caption_id;
    insert(std::move(rec), /*normalize=*/true);
    if (audit) audit_[id] = std::move(*audit);
    return std::move(*this);
  }

  struct Addition {
    CaptionRecord record;
    std::optional<AuditEntry> audit;
  };

  /// Appends several synthetic records at once; all-or-nothing.
  Datastore add_synthetic(std::vector<Addition> additions) const& {
    Datastore next = *this;
    for (auto& a : additions) next = std::move(next).add_synthetic(std::move(a.record), std::move(a.audit));
    return next;
  }

  /// Exact top-k by cosine similarity; ties broken by ascending caption_id.
  std::vector<Neighbor> topk(const Eigen::Ref<const Vector>& query, std::size_t k) const {
    if (k == 0) throw ValidationError("topk: k must be >= 1");
    if (static_cast<std::size_t>(query.size()) != dim()) {
      throw ValidationError("topk: query d=" + std::to_string(query.size()) + " but store d=" + std::to_string(dim()));
    }
    require_finite(query, "topk query");
    const double qn = query.norm();
    std::vector<Neighbor> all(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const double denom = norms_[i] * qn;
      const double s = denom == 0.0 ? 0.0 : records_[i].embedding.dot(query) / denom;
      all[i] = {i, std::clamp(s, -1.0, 1.0)};
    }
    const std::size_t take = std::min(k, all.size());
    auto before = [this](const Neighbor& a, const Neighbor& b) {
      if (a.score != b.score) return a.score > b.score;
      return records_[a.index].caption_id < records_[b.index].caption_id;
    };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(), before);
    all.resize(take);
    return all;
  }

  const std::vector<CaptionRecord>& records() const { return records_; }
  const CaptionRecord& at(std::size_t i) const { return records_.at(i); }
  std::size_t size() const { return records_.size(); }
  std::size_t dim() const { return manifest_.d; }
  const StoreManifest& manifest() const { return manifest_; }
  const std::map<std::string, AuditEntry>& audit() const { return audit_; }

  std::optional<std::size_t> find(const std::string& caption_id) const {
    auto it = index_.find(caption_id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  friend bool operator==(const Datastore& a, const Datastore& b) {
    return a.manifest_ == b.manifest_ && a.records_ == b.records_ && a.audit_ == b.audit_;
  }

  void save(const std::filesystem::path& dir) const;
  static Datastore load(const std::filesystem::path& dir);

 private:
  void insert(CaptionRecord rec, bool normalize) {
    const auto& id = rec.caption_id;
    if (id.empty()) throw ValidationError("caption_id must be non-empty");
    if (index_.count(id) != 0) throw ValidationError("duplicate caption_id '" + id + "'");
    if (rec.text.empty()) throw ValidationError("caption '" + id + "' has empty text");
    if (static_cast<std::size_t>(rec.embedding.size()) != manifest_.d) {
      throw ValidationError("caption '" + id + "' has d=" + std::to_string(rec.embedding.size()) +
                            ", store d=" + std::to_string(manifest_.d));
    }
    require_finite(rec.embedding, "caption '" + id + "' embedding");
    if (rec.provenance == Provenance::human && rec.dal_iteration != 0) {
      throw ValidationError("human caption '" + id + "' must have dal_iteration 0");
    }
    if (rec.provenance == Provenance::synthetic && rec.dal_iteration == 0) {
      throw ValidationError("synthetic caption '" + id + "' must have dal_iteration >= 1");
    }
    double norm = rec.embedding.norm();
    if (norm == 0.0) throw ValidationError("caption '" + id + "' has a zero embedding");
    if (normalize) {
      rec.embedding /= norm;
      rec.embedding = rec.embedding.cast<float>().cast<double>();
      norm = rec.embedding.norm();
    } else if (std::abs(norm - 1.0) > 1e-6) {
      throw FormatError("caption '" + id + "' embedding is not unit norm");
    }
    (rec.provenance == Provenance::human ? manifest_.human_count : manifest_.synthetic_count) += 1;
    index_.emplace(id, records_.size());
    norms_.push_back(norm);
    records_.push_back(std::move(rec));
  }

  std::vector<CaptionRecord> records_;
  std::vector<double> norms_;
  std::unordered_map<std::string, std::size_t> index_;
  std::map<std::string, AuditEntry> audit_;
  StoreManifest manifest_;
};

// Store directory layout:
//   manifest.json    dataset tag, d, counts, map fingerprint, format version, per-file CRC32
//   records.jsonl    one record per line (caption_id, text, provenance, dal_iteration, source_image_id)
//   embeddings.embx  EMBX text matrix whose row order matches records.jsonl
//   audit.jsonl      admission score/threshold for synthetic captions
namespace store_files {
inline constexpr int format_version = 1;
inline constexpr const char* manifest = "manifest.json";
inline constexpr const char* records = "records.jsonl";
inline constexpr const char* embeddings = "embeddings.embx";
inline constexpr const char* audit = "audit.jsonl";
}  // namespace store_files

inline void Datastore::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  std::string records_text;
  std::vector<std::string> ids;
  RowMatrix emb(static_cast<Eigen::Index>(records_.size()), static_cast<Eigen::Index>(dim()));
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    nlohmann::json line = {{"caption_id", r.caption_id},
                           {"text", r.text},
                           {"provenance", to_string(r.provenance)},
                           {"dal_iteration", r.dal_iteration},
                           {"source_image_id", r.source_image_id ? nlohmann::json(*r.source_image_id) : nlohmann::json()}};
    try {
      records_text += line.dump();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("caption '" + r.caption_id + "' is not valid UTF-8: " + e.what());
    }
    records_text += '\n';
    ids.push_back(r.caption_id);
    emb.row(static_cast<Eigen::Index>(i)) = r.embedding.transpose();
  }
  const auto embx_bytes = embx::encode(EmbeddingMatrix(std::move(ids), std::move(emb), Modality::text));

  std::string audit_text;
  for (const auto& [id, a] : audit_) {
    audit_text += nlohmann::json{{"caption_id", id}, {"score", a.score}, {"threshold", a.threshold}, {"metric", a.metric}}
                      .dump();
    audit_text += '\n';
  }

  auto file_entry = [](std::span<const std::byte> bytes) {
    return nlohmann::json{{"crc32", crc32(bytes)}, {"bytes", bytes.size()}};
  };
  auto text_bytes = [](const std::string& s) { return std::as_bytes(std::span(s.data(), s.size())); };

  nlohmann::json manifest = {
      {"format_version", store_files::format_version},
      {"dataset_tag", manifest_.dataset_tag},
      {"map_fingerprint", manifest_.map_fingerprint},
      {"d", manifest_.d},
      {"counts", {{"human", manifest_.human_count}, {"synthetic", manifest_.synthetic_count}, {"total", size()}}},
      {"files",
       {{store_files::records, file_entry(text_bytes(records_text))},
        {store_files::embeddings, file_entry(embx_bytes)},
        {store_files::audit, file_entry(text_bytes(audit_text))}}},
  };
  write_file_text(dir / store_files::records, records_text);
  write_file_bytes(dir / store_files::embeddings, embx_bytes);
  write_file_text(dir / store_files::audit, audit_text);
  // The manifest carries its own CRC over the compact dump of every other key.
  const std::string canonical = manifest.dump();
  manifest["manifest_crc32"] = crc32(text_bytes(canonical));
  write_file_text(dir / store_files::manifest, manifest.dump(2) + "\n");
}

inline Datastore Datastore::load(const std::filesystem::path& dir) {
  using nlohmann::json;
  const std::string where = "store " + dir.string();
  json manifest;
  try {
    manifest = json::parse(read_file_text(dir / store_files::manifest));
  } catch (const json::exception& e) {
    throw FormatError(where + ": malformed manifest.json: " + e.what());
  }
  try {
    if (!manifest.is_object() || !manifest.contains("manifest_crc32")) {
      throw FormatError(where + ": manifest.json has no manifest_crc32");
    }
    const auto recorded = manifest.at("manifest_crc32").get<std::uint32_t>();
    manifest.erase("manifest_crc32");
    const std::string canonical = manifest.dump();
    if (crc32(std::as_bytes(std::span(canonical.data(), canonical.size()))) != recorded) {
      throw FormatError(where + ": manifest.json CRC mismatch");
    }
    if (manifest.at("format_version").get<int>() != store_files::format_version) {
      throw FormatError(where + ": unsupported format_version " + manifest.at("format_version").dump());
    }
    auto checked = [&](const char* name) {
      auto bytes = read_file_bytes(dir / name);
      const auto& entry = manifest.at("files").at(name);
      if (entry.at("bytes").get<std::size_t>() != bytes.size()) {
        throw FormatError(where + ": " + name + " size does not match manifest (truncated?)");
      }
      if (entry.at("crc32").get<std::uint32_t>() != crc32(bytes)) {
        throw FormatError(where + ": " + name + " CRC mismatch");
      }
      return bytes;
    };
    const auto records_bytes = checked(store_files::records);
    const auto embx_bytes = checked(store_files::embeddings);
    const auto audit_bytes = checked(store_files::audit);

    const EmbeddingMatrix emb = embx::decode(embx_bytes);
    Datastore s;
    s.manifest_.dataset_tag = manifest.at("dataset_tag").get<std::string>();
    s.manifest_.map_fingerprint = manifest.at("map_fingerprint").get<std::string>();
    s.manifest_.d = manifest.at("d").get<std::size_t>();
    if (emb.dim() != s.manifest_.d) throw FormatError(where + ": embedding d does not match manifest");

    std::istringstream lines(std::string(reinterpret_cast<const char*>(records_bytes.data()), records_bytes.size()));
    std::string line;
    std::size_t row = 0;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      CaptionRecord r;
      r.caption_id = j.at("caption_id").get<std::string>();
      r.text = j.at("text").get<std::string>();
      r.provenance = parse_provenance(j.at("provenance").get<std::string>());
      r.dal_iteration = j.at("dal_iteration").get<std::uint32_t>();
      if (!j.at("source_image_id").is_null()) r.source_image_id = j.at("source_image_id").get<std::string>();
      if (row >= emb.rows() || emb.ids()[row] != r.caption_id) {
        throw FormatError(where + ": records.jsonl and embeddings.embx rows disagree at line " + std::to_string(row + 1));
      }
      r.embedding = emb.row(row).transpose();
      s.insert(std::move(r), /*normalize=*/false);
      ++row;
    }
    if (row != emb.rows()) throw FormatError(where + ": embeddings.embx has extra rows");

    std::istringstream audit_lines(std::string(reinterpret_cast<const char*>(audit_bytes.data()), audit_bytes.size()));
    while (std::getline(audit_lines, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      s.audit_[j.at("caption_id").get<std::string>()] = {j.at("score").get<double>(), j.at("threshold").get<double>(),
                                                         j.at("metric").get<std::string>()};
    }
    const auto& counts = manifest.at("counts");
    if (counts.at("human").get<std::size_t>() != s.manifest_.human_count ||
        counts.at("synthetic").get<std::size_t>() != s.manifest_.synthetic_count) {
      throw FormatError(where + ": manifest counts do not match records");
    }
    return s;
  } catch (const json::exception& e) {
    throw FormatError(where + ": malformed content: " + e.what());
  } catch (const Error& e) {
    if (std::string_view(e.what()).starts_with(where)) throw;
    rethrow_labeled(e, where);
  }
}

}  // namespace recap

#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recap/binary_io.hpp"
#include "recap/error.hpp"

// Line-oriented input formats shared by the CLI:
//   pairs CSV        image_id,caption_id              (optional header row)
//   metric CSV       id,metric_name,value             (header row required)
//   judgments JSONL  {"image_id", "candidate", "human_score", "metric_scores": {name: value}, "id"?}
//   captions JSONL   {"caption_id", "text", "source_image_id"?}
//   references JSONL {"image_id", "references": [text, ...]}
//   candidates JSONL {"image_id", "candidate", "references"?: [text, ...]}
namespace recap::formats {

/// Splits one CSV line; double-quoted fields may contain commas and "" escapes.
inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  if (quoted) throw FormatError("unterminated quote in CSV line");
  return fields;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::istringstream in(read_file_text(path));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(std::move(line));
  }
  return out;
}

/// Parses each non-empty line as JSON, labeling errors with file and line number.
template <typename Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    try {
      fn(nlohmann::json::parse(lines[i]), i + 1);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    } catch (const Error& e) {
      rethrow_labeled(e, where);
    }
  }
}

struct Pair {
  std::string image_id;
  std::string caption_id;
};

inline std::vector<Pair> read_pairs_csv(const std::filesystem::path& path) {
  std::vector<Pair> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split_csv_line(lines[i]);
    if (f.size() != 2) {
      throw FormatError(path.string() + ":" + std::to_string(i + 1) + ": expected image_id,caption_id");
    }
    if (i == 0 && f[0] == "image_id" && f[1] == "caption_id") continue;
    out.push_back({f[0], f[1]});
  }
  if (out.empty()) throw ValidationError(path.string() + ": no pairs");
  return out;
}

/// metric_name -> id -> value
using MetricColumns = std::map<std::string, std::unordered_map<std::string, double>>;

inline MetricColumns read_metric_csv(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || split_csv_line(lines[0]) != std::vector<std::string>{"id", "metric_name", "value"}) {
    throw FormatError(path.string() + ": expected header id,metric_name,value");
  }
  MetricColumns out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    const auto f = split_csv_line(lines[i]);
    if (f.size() != 3) throw FormatError(where + ": expected 3 fields");
    double value = 0.0;
    try {
      std::size_t used = 0;
      value = std::stod(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw FormatError(where + ": bad value '" + f[2] + "'");
    }
    if (!out[f[1]].emplace(f[0], value).second) throw FormatError(where + ": duplicate id '" + f[0] + "'");
  }
  return out;
}

struct Judgment {
  std::string id;
  std::string image_id;
  std::string candidate;
  double human_score = 0.0;
  std::map<std::string, double> metric_scores;
};

/// Judgments without an explicit "id" get their 1-based line number as id.
inline std::vector<Judgment> read_judgments(const std::filesystem::path& path) {
  std::vector<Judgment> out;
  for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t line) {
    Judgment r;
    r.id = j.contains("id") ? j.at("id").get<std::string>() : std::to_string(line);
    r.image_id = j.at("image_id").get<std::string>();
    r.candidate = j.at("candidate").get<std::string>();
    r.human_score = j.at("human_score").get<double>();
    if (j.contains("metric_scores")) {
      for (const auto& [name, v] : j.at("metric_scores").items()) r.metric_scores[name] = v.get<double>();
    }
    out.push_back(std::move(r));
  });
  return out;
}

struct CaptionLine {
  std::string caption_id;
  std::string text;
  std::optional<std::string> source_image_id;
};

inline std::vector<CaptionLine> read_captions(const std::filesystem::path& path) {
  std::vector<CaptionLine> out;
  for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) {
    CaptionLine c{j.at("caption_id").get<std::string>(), j.at("text").get<std::string>(), std::nullopt};
    if (j.contains("source_image_id") && !j.at("source_image_id").is_null()) {
      c.source_image_id = j.at("source_image_id").get<std::string>();
    }
    out.push_back(std::move(c));
  });
  return out;
}

/// image_id -> reference captions, in file order.
inline std::vector<std::pair<std::string, std::vector<std::string>>> read_references(const std::filesystem::path& path) {
  std::vector<std::pair<std::string, std::vector<std::string>>> out;
  for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) {
    auto refs = j.at("references").get<std::vector<std::string>>();
    if (refs.empty()) throw ValidationError("image '" + j.at("image_id").get<std::string>() + "' has no references");
    out.emplace_back(j.at("image_id").get<std::string>(), std::move(refs));
  });
  return out;
}

struct CandidateLine {
  std::string image_id;
  std::string candidate;
  std::vector<std::string> references;
};

inline std::vector<CandidateLine> read_candidates(const std::filesystem::path& path) {
  std::vector<CandidateLine> out;
  for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) {
    CandidateLine c{j.at("image_id").get<std::string>(), j.at("candidate").get<std::string>(), {}};
    if (j.contains("references")) c.references = j.at("references").get<std::vector<std::string>>();
    out.push_back(std::move(c));
  });
  return out;
}

}  // namespace recap::formats

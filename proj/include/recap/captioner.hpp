#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "recap/align.hpp"
#include "recap/embedding.hpp"
#include "recap/error.hpp"
#include "recap/vecstore.hpp"

namespace recap {

enum class Ordering { worst_to_best, best_to_worst };

inline Ordering parse_ordering(std::string_view s) {
  if (s == "worst_to_best") return Ordering::worst_to_best;
  if (s == "best_to_worst") return Ordering::best_to_worst;
  throw ValidationError("unknown ordering '" + std::string(s) + "' (expected worst_to_best|best_to_worst)");
}

inline const char* to_string(Ordering o) { return o == Ordering::worst_to_best ? "worst_to_best" : "best_to_worst"; }

struct PromptTemplate {
  std::string prefix = "Similar images show: ";
  std::string separator = ", ";
  std::string suffix = " This image shows:";
  Ordering ordering = Ordering::worst_to_best;
};

struct RetrievedCaption {
  std::string caption_id;
  std::string text;
  double score = 0.0;

  friend bool operator==(const RetrievedCaption&, const RetrievedCaption&) = default;
};

/// prefix + captions joined by separator + suffix. `retrieved` must be sorted by
/// descending score; worst_to_best places the most similar caption last.
inline std::string assemble_prompt(const PromptTemplate& t, std::span<const RetrievedCaption> retrieved) {
  if (retrieved.empty()) throw ValidationError("assemble_prompt: no retrieved captions");
  for (std::size_t i = 1; i < retrieved.size(); ++i) {
    if (retrieved[i].score > retrieved[i - 1].score) {
      throw ValidationError("assemble_prompt: retrieved captions are not sorted by descending score");
    }
  }
  std::vector<const RetrievedCaption*> order;
  for (const auto& r : retrieved) order.push_back(&r);
  if (t.ordering == Ordering::worst_to_best) std::reverse(order.begin(), order.end());
  std::string out = t.prefix;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0) out += t.separator;
    out += order[i]->text;
  }
  out += t.suffix;
  return out;
}

struct GenerationRequest {
  std::string prompt;
  std::size_t num_samples = 10;
  double temperature = 0.1;
  double top_p = 0.9;
  std::size_t max_tokens = 40;
  std::optional<std::int64_t> seed;

  friend bool operator==(const GenerationRequest&, const GenerationRequest&) = default;
};

inline void validate(const GenerationRequest& r) {
  if (r.num_samples < 1) throw ValidationError("generation: num_samples must be >= 1");
  if (!(r.temperature > 0.0)) throw ValidationError("generation: temperature must be > 0");
  if (!(r.top_p > 0.0 && r.top_p <= 1.0)) throw ValidationError("generation: top_p must be in (0, 1]");
  if (r.max_tokens < 1) throw ValidationError("generation: max_tokens must be >= 1");
}

/// Wire form of POST /v1/generate.
inline nlohmann::json to_json(const GenerationRequest& r) {
  return {{"prompt", r.prompt},
          {"num_samples", r.num_samples},
          {"temperature", r.temperature},
          {"top_p", r.top_p},
          {"max_tokens", r.max_tokens},
          {"seed", r.seed ? nlohmann::json(*r.seed) : nlohmann::json()}};
}

/// Samples caption candidates from a language model. Implementations must be
/// safe to call from several threads.
class GeneratorClient {
 public:
  virtual ~GeneratorClient() = default;
  virtual std::vector<std::string> generate(const GenerationRequest& request) = 0;
};

/// Raw (unpreprocessed) text embeddings, one row per input. Thread-safe.
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual RowMatrix embed(std::span<const std::string> texts) = 0;
};

/// Memoizes another embedder per unique string.
class CachingTextEmbedder : public TextEmbedder {
 public:
  explicit CachingTextEmbedder(TextEmbedder& inner) : inner_(inner) {}

  RowMatrix embed(std::span<const std::string> texts) override {
    std::vector<std::string> missing;
    {
      std::lock_guard lock(mu_);
      std::unordered_set<std::string_view> queued;
      for (const auto& t : texts) {
        if (cache_.count(t) == 0 && queued.insert(t).second) missing.push_back(t);
      }
    }
    if (!missing.empty()) {
      RowMatrix fresh = inner_.embed(missing);
      if (static_cast<std::size_t>(fresh.rows()) != missing.size()) {
        throw ExternalServiceError("embedder returned " + std::to_string(fresh.rows()) + " rows for " +
                                   std::to_string(missing.size()) + " texts");
      }
      std::lock_guard lock(mu_);
      for (std::size_t i = 0; i < missing.size(); ++i) {
        cache_.emplace(missing[i], fresh.row(static_cast<Eigen::Index>(i)).transpose());
      }
    }
    std::lock_guard lock(mu_);
    if (texts.empty()) return RowMatrix(0, 0);
    const auto d = cache_.at(texts.front()).size();
    RowMatrix out(static_cast<Eigen::Index>(texts.size()), d);
    for (std::size_t i = 0; i < texts.size(); ++i) {
      const Vector& v = cache_.at(texts[i]);
      if (v.size() != d) throw ExternalServiceError("embedder returned inconsistent dimensions");
      out.row(static_cast<Eigen::Index>(i)) = v.transpose();
    }
    return out;
  }

  std::size_t cached() const {
    std::lock_guard lock(mu_);
    return cache_.size();
  }

 private:
  TextEmbedder& inner_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, Vector> cache_;
};

/// Embeds `texts` and applies the map's text-side preprocessing.
inline std::vector<Vector> embed_preprocessed(TextEmbedder& embedder, const AlignmentMap& map,
                                              std::span<const std::string> texts) {
  if (texts.empty()) return {};
  const RowMatrix raw = embedder.embed(texts);
  if (static_cast<std::size_t>(raw.rows()) != texts.size()) {
    throw ExternalServiceError("embedder returned " + std::to_string(raw.rows()) + " rows for " +
                               std::to_string(texts.size()) + " texts");
  }
  if (static_cast<std::size_t>(raw.cols()) != map.dim()) {
    throw ValidationError("embedder returned d=" + std::to_string(raw.cols()) + ", map expects d=" +
                          std::to_string(map.dim()));
  }
  std::vector<Vector> out;
  out.reserve(texts.size());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    try {
      out.push_back(preprocess_vector(map.preprocessor, raw.row(i).transpose(), Modality::text));
    } catch (const Error& e) {
      rethrow_labeled(e, "text '" + texts[static_cast<std::size_t>(i)] + "'");
    }
  }
  return out;
}

struct GeneratedCandidates {
  std::vector<std::string> texts;
  std::size_t requested = 0;
  std::size_t returned = 0;
  std::size_t dropped_empty = 0;
};

inline std::string trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

/// Requests l candidates; trims whitespace, drops empties, keeps at most l.
inline GeneratedCandidates generate_candidates(GeneratorClient& gen, const GenerationRequest& req) {
  validate(req);
  std::vector<std::string> raw = gen.generate(req);
  GeneratedCandidates out;
  out.requested = req.num_samples;
  out.returned = raw.size();
  for (auto& s : raw) {
    std::string t = trim(s);
    if (t.empty()) {
      ++out.dropped_empty;
    } else if (out.texts.size() < req.num_samples) {
      out.texts.push_back(std::move(t));
    }
  }
  return out;
}

struct Candidate {
  std::string text;
  double aligned_score = 0.0;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct CandidateSet {
  std::vector<Candidate> candidates;
  std::size_t selected_index = 0;
  std::size_t requested = 0;
  std::size_t returned = 0;
  std::size_t dropped_empty = 0;
  std::size_t duplicates = 0;

  std::size_t shortfall() const { return requested > candidates.size() ? requested - candidates.size() : 0; }
  const Candidate& selected() const { return candidates.at(selected_index); }

  friend bool operator==(const CandidateSet&, const CandidateSet&) = default;
};

/// Index of the first maximal score.
inline std::size_t argmax_first(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

/// Scores each distinct candidate by cos(preprocessed psi(s), W phi(x)) and
/// selects the maximum, ties to the lowest index.
inline CandidateSet select_candidate(const GeneratedCandidates& generated, const Eigen::Ref<const Vector>& image_vec,
                                     const AlignmentMap& map, TextEmbedder& embedder) {
  CandidateSet out;
  out.requested = generated.requested;
  out.returned = generated.returned;
  out.dropped_empty = generated.dropped_empty;

  std::vector<std::string> unique;
  std::unordered_set<std::string> seen;
  for (const auto& t : generated.texts) {
    if (t.empty()) {
      ++out.dropped_empty;
    } else if (seen.insert(t).second) {
      unique.push_back(t);
    } else {
      ++out.duplicates;
    }
  }
  if (unique.empty()) throw ValidationError("select_candidate: no non-empty candidates");

  const Vector query = apply_map(map, image_vec);
  const auto embedded = embed_preprocessed(embedder, map, unique);
  std::vector<double> scores;
  for (std::size_t i = 0; i < unique.size(); ++i) {
    scores.push_back(cosine(embedded[i], query));
    out.candidates.push_back({std::move(unique[i]), scores.back()});
  }
  out.selected_index = argmax_first(scores);
  return out;
}

inline CandidateSet select_candidate(std::span<const std::string> candidates, const Eigen::Ref<const Vector>& image_vec,
                                     const AlignmentMap& map, TextEmbedder& embedder) {
  GeneratedCandidates g;
  g.texts.assign(candidates.begin(), candidates.end());
  g.requested = g.returned = candidates.size();
  return select_candidate(g, image_vec, map, embedder);
}

/// Top-k retrieval for a raw image embedding.
inline std::vector<RetrievedCaption> retrieve(const AlignmentMap& map, const Datastore& store,
                                              const Eigen::Ref<const Vector>& image_vec, std::size_t k) {
  if (map.dim() != store.dim()) {
    throw ValidationError("map d=" + std::to_string(map.dim()) + " but store d=" + std::to_string(store.dim()));
  }
  const Vector query = apply_map(map, image_vec);
  std::vector<RetrievedCaption> out;
  for (const auto& n : store.topk(query, k)) {
    const auto& r = store.at(n.index);
    out.push_back({r.caption_id, r.text, n.score});
  }
  return out;
}

struct CaptionResult {
  std::string caption;
  CandidateSet candidates;
  std::vector<RetrievedCaption> retrieved;
  std::string prompt;
  GenerationRequest request;
};

/// Retrieve -> prompt -> generate -> select. Errors carry the failing stage name.
inline CaptionResult caption_image(const Eigen::Ref<const Vector>& image_vec, const AlignmentMap& map,
                                   const Datastore& store, const PromptTemplate& tmpl, GeneratorClient& gen,
                                   TextEmbedder& embedder, std::size_t k, const GenerationRequest& request) {
  CaptionResult out;
  out.retrieved = with_stage("retrieve", [&] { return retrieve(map, store, image_vec, k); });
  out.prompt = with_stage("prompt", [&] { return assemble_prompt(tmpl, out.retrieved); });
  out.request = request;
  out.request.prompt = out.prompt;
  const auto generated = with_stage("generate", [&] { return generate_candidates(gen, out.request); });
  out.candidates = with_stage("select", [&] { return select_candidate(generated, image_vec, map, embedder); });
  out.caption = out.candidates.selected().text;
  return out;
}

inline nlohmann::json to_json(const CaptionResult& r) {
  nlohmann::json retrieved = nlohmann::json::array();
  for (const auto& c : r.retrieved) {
    retrieved.push_back({{"caption_id", c.caption_id}, {"text", c.text}, {"score", c.score}});
  }
  nlohmann::json candidates = nlohmann::json::array();
  for (const auto& c : r.candidates.candidates) {
    candidates.push_back({{"text", c.text}, {"aligned_score", c.aligned_score}});
  }
  nlohmann::json request = to_json(r.request);
  request.erase("prompt");
  return {{"caption", r.caption},
          {"selected_index", r.candidates.selected_index},
          {"candidates", std::move(candidates)},
          {"requested", r.candidates.requested},
          {"returned", r.candidates.returned},
          {"dropped_empty", r.candidates.dropped_empty},
          {"duplicates", r.candidates.duplicates},
          {"shortfall", r.candidates.shortfall()},
          {"retrieved", std::move(retrieved)},
          {"prompt", r.prompt},
          {"generation", std::move(request)}};
}

}  // namespace recap

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recap/align.hpp"
#include "recap/binary_io.hpp"
#include "recap/captioner.hpp"
#include "recap/checksum.hpp"
#include "recap/error.hpp"
#include "recap/formats.hpp"
#include "recap/metrics.hpp"
#include "recap/vecstore.hpp"

namespace recap {

/// One image taking part in the loop: raw image embedding plus its references.
struct DalItem {
  std::string image_id;
  Vector image_vec;
  ReferenceSet refs;
};

struct MetricInput {
  const DalItem& item;
  const std::string& candidate;
  const Vector& candidate_vec;  // preprocessed text embedding
  const Vector& aligned_image;  // W * preprocess(phi(x))
};

/// Caption-quality metric used for thresholding and filtering.
class CaptionMetric {
 public:
  virtual ~CaptionMetric() = default;
  virtual std::string name() const = 0;
  virtual double score(const MetricInput& in) const = 0;
};

class AclipMetric : public CaptionMetric {
 public:
  std::string name() const override { return "aclip"; }
  double score(const MetricInput& in) const override { return aclip_s_aligned(in.candidate_vec, in.aligned_image); }
};

class RefAclipMetric : public CaptionMetric {
 public:
  std::string name() const override { return "ref_aclip"; }
  double score(const MetricInput& in) const override {
    return harmonic_mean2(aclip_s_aligned(in.candidate_vec, in.aligned_image),
                          best_reference_similarity(in.candidate_vec, in.item.refs));
  }
};

/// Scores looked up from an external metric column keyed by "<image_id>\t<candidate>".
class ExternalTableMetric : public CaptionMetric {
 public:
  ExternalTableMetric(std::string name, std::unordered_map<std::string, double> table)
      : name_(std::move(name)), table_(std::move(table)) {}

  static std::string key(const std::string& image_id, const std::string& candidate) {
    return image_id + "\t" + candidate;
  }

  std::string name() const override { return name_; }
  double score(const MetricInput& in) const override {
    auto it = table_.find(key(in.item.image_id, in.candidate));
    if (it == table_.end()) {
      throw ValidationError("external metric '" + name_ + "' has no score for image '" + in.item.image_id +
                            "' candidate '" + in.candidate + "'");
    }
    return it->second;
  }

 private:
  std::string name_;
  std::unordered_map<std::string, double> table_;
};

struct DalConfig {
  std::size_t iterations = 5;
  std::size_t initial_k = 13;
  std::vector<std::size_t> k_grid = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17};
  GenerationRequest generation;  // prompt is filled per image; seed is the base seed
  PromptTemplate prompt;
  bool one_best_per_image = true;
  std::size_t jobs = 1;
};

inline void validate(const DalConfig& c) {
  if (c.k_grid.empty()) throw ValidationError("DAL: k_grid must be non-empty");
  if (!std::is_sorted(c.k_grid.begin(), c.k_grid.end()) ||
      std::adjacent_find(c.k_grid.begin(), c.k_grid.end()) != c.k_grid.end()) {
    throw ValidationError("DAL: k_grid must be strictly ascending");
  }
  if (c.k_grid.front() == 0 || c.initial_k == 0) throw ValidationError("DAL: k values must be >= 1");
  if (c.jobs == 0) throw ValidationError("DAL: jobs must be >= 1");
  validate(c.generation);
}

struct IterationReport {
  std::size_t iteration = 0;
  double threshold = 0.0;
  double validation_mean = 0.0;
  double validation_stderr = 0.0;
  std::size_t candidates_generated = 0;
  std::size_t candidates_added = 0;
  std::size_t chosen_k = 0;
  std::vector<std::pair<std::size_t, double>> k_scores;
  std::map<std::string, double> validation_scores;
  std::vector<std::string> notes;

  friend bool operator==(const IterationReport&, const IterationReport&) = default;
};

struct DalState {
  std::size_t iteration = 0;
  double threshold = 0.0;
  std::size_t current_k = 0;
  std::string datastore_version;
  std::vector<IterationReport> history;

  friend bool operator==(const DalState&, const DalState&) = default;
};

struct DalComponents {
  const AlignmentMap& map;
  GeneratorClient& generator;
  TextEmbedder& embedder;  // wrap in CachingTextEmbedder for repeated candidates
  const CaptionMetric& metric;
};

/// Thrown when generation fails mid-run after progress was checkpointed.
class DalInterrupted : public ExternalServiceError {
 public:
  DalInterrupted(const std::string& what, std::filesystem::path resume_dir)
      : ExternalServiceError(what), resume_dir_(std::move(resume_dir)) {}
  const std::filesystem::path& resume_dir() const { return resume_dir_; }

 private:
  std::filesystem::path resume_dir_;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results are indexed;
/// the first failing index (if any) is reported with its exception.
template <typename T, typename Fn>
std::pair<std::vector<std::optional<T>>, std::optional<std::pair<std::size_t, std::exception_ptr>>> parallel_indexed(
    std::size_t n, std::size_t jobs, Fn&& fn) {
  std::vector<std::optional<T>> results(n);
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t worker, std::size_t workers) {
    for (std::size_t i = worker; i < n; i += workers) {
      try {
        results[i] = fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, n));
  if (workers == 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) return {std::move(results), std::make_pair(i, errors[i])};
  }
  return {std::move(results), std::nullopt};
}

enum class Phase : std::uint64_t { threshold = 1, train = 2, k_search = 3 };

}  // namespace detail

/// Per-request seed from the base seed, iteration, phase and image id, so a
/// resumed run issues the same requests as an uninterrupted one.
inline std::optional<std::int64_t> derive_seed(std::optional<std::int64_t> base, std::size_t iteration,
                                               detail::Phase phase, std::string_view image_id, std::size_t k = 0) {
  if (!base) return std::nullopt;
  std::uint64_t h = detail::splitmix64(static_cast<std::uint64_t>(*base));
  h = detail::splitmix64(h ^ iteration);
  h = detail::splitmix64(h ^ static_cast<std::uint64_t>(phase));
  h = detail::splitmix64(h ^ k);
  h = detail::splitmix64(h ^ detail::fnv1a(image_id));
  return static_cast<std::int64_t>(h >> 1);
}

struct ScoredCandidate {
  std::string text;
  double score = 0.0;
};

struct ImageCandidates {
  std::string image_id;
  std::vector<ScoredCandidate> candidates;
};

struct Admission {
  std::string image_id;
  std::size_t candidate_index = 0;
  std::string text;
  double score = 0.0;

  friend bool operator==(const Admission&, const Admission&) = default;
};

/// Keeps candidates scoring strictly above `threshold`; with one_best only the
/// highest-scoring survivor per image (ties to the lowest index).
inline std::vector<Admission> filter_candidates(std::span<const ImageCandidates> images, double threshold,
                                                bool one_best) {
  std::vector<Admission> out;
  for (const auto& img : images) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < img.candidates.size(); ++i) {
      const auto& c = img.candidates[i];
      if (!(c.score > threshold)) continue;
      if (!one_best) {
        out.push_back({img.image_id, i, c.text, c.score});
      } else if (!best || c.score > img.candidates[*best].score) {
        best = i;
      }
    }
    if (best) out.push_back({img.image_id, *best, img.candidates[*best].text, img.candidates[*best].score});
  }
  return out;
}

struct ValidationRun {
  std::vector<CaptionResult> captions;
  std::vector<double> scores;
  Aggregate summary;
};

/// Captions every item with ReCap and scores the selected caption with `metric`.
inline ValidationRun evaluate_items(std::span<const DalItem> items, const Datastore& store, const DalComponents& comps,
                                    const DalConfig& cfg, std::size_t k, std::size_t iteration, detail::Phase phase,
                                    const CaptionMetric& metric) {
  if (items.empty()) throw ValidationError("validation set is empty");
  auto [results, failure] = detail::parallel_indexed<std::pair<CaptionResult, double>>(
      items.size(), cfg.jobs, [&](std::size_t i) {
        const DalItem& item = items[i];
        try {
          GenerationRequest req = cfg.generation;
          req.seed = derive_seed(cfg.generation.seed, iteration, phase, item.image_id, k);
          CaptionResult r =
              caption_image(item.image_vec, comps.map, store, cfg.prompt, comps.generator, comps.embedder, k, req);
          const std::vector<std::string> text{r.caption};
          const Vector cand = embed_preprocessed(comps.embedder, comps.map, text).front();
          const Vector aligned = apply_map(comps.map, item.image_vec);
          const double s = metric.score({item, r.caption, cand, aligned});
          return std::make_pair(std::move(r), s);
        } catch (const Error& e) {
          rethrow_labeled(e, "image '" + item.image_id + "'");
        }
      });
  if (failure) std::rethrow_exception(failure->second);
  ValidationRun out;
  for (auto& r : results) {
    out.captions.push_back(std::move(r->first));
    out.scores.push_back(r->second);
  }
  out.summary = aggregate(out.scores);
  return out;
}

/// Average validation score of the current pipeline.
inline double compute_threshold(std::span<const DalItem> val, const Datastore& store, const DalComponents& comps,
                                const DalConfig& cfg, std::size_t k, std::size_t iteration = 0) {
  return evaluate_items(val, store, comps, cfg, k, iteration, detail::Phase::threshold, comps.metric).summary.mean;
}

struct KSearchResult {
  std::size_t best_k = 0;
  std::vector<std::pair<std::size_t, double>> scores;
  std::vector<std::string> notes;
};

/// Validation mean per k in the grid; argmax with ties to the smallest k. Grid
/// values above the store size are evaluated at k = |store|.
inline KSearchResult search_k(std::span<const DalItem> val, const Datastore& store, const DalComponents& comps,
                              const DalConfig& cfg, std::span<const std::size_t> k_grid, std::size_t iteration = 0) {
  if (k_grid.empty()) throw ValidationError("search_k: empty k grid");
  KSearchResult out;
  std::optional<double> best;
  for (const std::size_t k : k_grid) {
    if (k == 0) throw ValidationError("search_k: k must be >= 1");
    std::size_t effective = k;
    if (k > store.size()) {
      effective = store.size();
      out.notes.push_back("k=" + std::to_string(k) + " exceeds datastore size " + std::to_string(store.size()) +
                          "; evaluated as k=" + std::to_string(effective));
    }
    const double mean =
        evaluate_items(val, store, comps, cfg, effective, iteration, detail::Phase::k_search, comps.metric).summary.mean;
    out.scores.emplace_back(k, mean);
    if (!best || mean > *best) {
      best = mean;
      out.best_k = k;
    }
  }
  return out;
}

inline nlohmann::json to_json(const IterationReport& r) {
  nlohmann::json k_scores = nlohmann::json::array();
  for (const auto& [k, s] : r.k_scores) k_scores.push_back({{"k", k}, {"score", s}});
  return {{"iteration", r.iteration},
          {"threshold", r.threshold},
          {"validation_mean", r.validation_mean},
          {"validation_stderr", r.validation_stderr},
          {"candidates_generated", r.candidates_generated},
          {"candidates_added", r.candidates_added},
          {"chosen_k", r.chosen_k},
          {"k_scores", std::move(k_scores)},
          {"validation_scores", r.validation_scores},
          {"notes", r.notes}};
}

inline IterationReport iteration_report_from_json(const nlohmann::json& j) {
  IterationReport r;
  r.iteration = j.at("iteration").get<std::size_t>();
  r.threshold = j.at("threshold").get<double>();
  r.validation_mean = j.at("validation_mean").get<double>();
  r.validation_stderr = j.at("validation_stderr").get<double>();
  r.candidates_generated = j.at("candidates_generated").get<std::size_t>();
  r.candidates_added = j.at("candidates_added").get<std::size_t>();
  r.chosen_k = j.at("chosen_k").get<std::size_t>();
  for (const auto& e : j.at("k_scores")) r.k_scores.emplace_back(e.at("k").get<std::size_t>(), e.at("score").get<double>());
  r.validation_scores = j.at("validation_scores").get<std::map<std::string, double>>();
  r.notes = j.at("notes").get<std::vector<std::string>>();
  return r;
}

inline nlohmann::json to_json(const DalState& s) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : s.history) history.push_back(to_json(r));
  return {{"iteration", s.iteration},
          {"threshold", s.threshold},
          {"current_k", s.current_k},
          {"datastore_version", s.datastore_version},
          {"history", std::move(history)}};
}

inline DalState dal_state_from_json(const nlohmann::json& j) {
  DalState s;
  s.iteration = j.at("iteration").get<std::size_t>();
  s.threshold = j.at("threshold").get<double>();
  s.current_k = j.at("current_k").get<std::size_t>();
  s.datastore_version = j.at("datastore_version").get<std::string>();
  for (const auto& r : j.at("history")) s.history.push_back(iteration_report_from_json(r));
  return s;
}

/// Fingerprint of everything that must match for a checkpoint to be resumable.
inline std::string dal_run_fingerprint(const DalConfig& cfg, const DalComponents& comps, std::span<const DalItem> train,
                                       std::span<const DalItem> val) {
  nlohmann::json j = {{"iterations", cfg.iterations},
                      {"initial_k", cfg.initial_k},
                      {"k_grid", cfg.k_grid},
                      {"generation", to_json(cfg.generation)},
                      {"prefix", cfg.prompt.prefix},
                      {"separator", cfg.prompt.separator},
                      {"suffix", cfg.prompt.suffix},
                      {"ordering", to_string(cfg.prompt.ordering)},
                      {"one_best", cfg.one_best_per_image},
                      {"metric", comps.metric.name()},
                      {"map", fingerprint(comps.map)}};
  std::vector<std::string> ids;
  for (const auto& t : train) ids.push_back(t.image_id);
  j["train"] = sha256_hex(nlohmann::json(ids).dump());
  ids.clear();
  for (const auto& v : val) ids.push_back(v.image_id);
  j["val"] = sha256_hex(nlohmann::json(ids).dump());
  return sha256_hex(j.dump());
}

struct DalResult {
  Datastore store;
  std::vector<IterationReport> history;
};

namespace detail {

struct PendingAddition {
  Admission admission;
  Vector embedding;
};

/// In-iteration generation progress, persisted so an outage loses no work.
struct Progress {
  std::size_t iteration = 0;
  double threshold = 0.0;
  std::size_t cursor = 0;  // training images fully processed
  std::size_t generated = 0;
  std::vector<PendingAddition> pending;
};

inline nlohmann::json to_json(const Progress& p) {
  nlohmann::json pending = nlohmann::json::array();
  for (const auto& a : p.pending) {
    pending.push_back({{"image_id", a.admission.image_id},
                       {"candidate_index", a.admission.candidate_index},
                       {"text", a.admission.text},
                       {"score", a.admission.score},
                       {"embedding", std::vector<double>(a.embedding.data(), a.embedding.data() + a.embedding.size())}});
  }
  return {{"iteration", p.iteration},
          {"threshold", p.threshold},
          {"cursor", p.cursor},
          {"generated", p.generated},
          {"pending", std::move(pending)}};
}

inline Progress progress_from_json(const nlohmann::json& j) {
  Progress p;
  p.iteration = j.at("iteration").get<std::size_t>();
  p.threshold = j.at("threshold").get<double>();
  p.cursor = j.at("cursor").get<std::size_t>();
  p.generated = j.at("generated").get<std::size_t>();
  for (const auto& a : j.at("pending")) {
    const auto emb = a.at("embedding").get<std::vector<double>>();
    p.pending.push_back({{a.at("image_id").get<std::string>(), a.at("candidate_index").get<std::size_t>(),
                          a.at("text").get<std::string>(), a.at("score").get<double>()},
                         Eigen::Map<const Vector>(emb.data(), static_cast<Eigen::Index>(emb.size()))});
  }
  return p;
}

inline std::string store_version_name(std::size_t iteration) { return "store_" + std::to_string(iteration); }

}  // namespace detail

/// Where run_dal persists state. With resume set, an existing state.json in
/// `dir` is continued; otherwise the directory is (re)initialized.
struct DalCheckpoint {
  std::filesystem::path dir;
  bool resume = false;
};

/// Datastore-augmentation loop. Each iteration: threshold on validation ->
/// caption training images -> filter by threshold -> add -> re-search k.
inline DalResult run_dal(const DalConfig& cfg, std::span<const DalItem> train, std::span<const DalItem> val,
                         Datastore initial, const DalComponents& comps,
                         std::optional<DalCheckpoint> checkpoint = std::nullopt) {
  namespace fs = std::filesystem;
  validate(cfg);
  if (initial.dim() != comps.map.dim()) throw ValidationError("datastore d does not match map d");

  const std::string run_fp = dal_run_fingerprint(cfg, comps, train, val);
  DalState state{0, 0.0, cfg.initial_k, detail::store_version_name(0), {}};
  Datastore store = std::move(initial);
  std::optional<detail::Progress> progress;

  auto write_json = [](const fs::path& p, const nlohmann::json& j) { write_file_text(p, j.dump(2) + "\n"); };

  if (checkpoint) {
    const fs::path& dir = checkpoint->dir;
    if (checkpoint->resume && fs::exists(dir / "state.json")) {
      const auto j = nlohmann::json::parse(read_file_text(dir / "state.json"));
      if (j.at("run_fingerprint").get<std::string>() != run_fp) {
        throw ValidationError("checkpoint in " + dir.string() + " was written by a different configuration");
      }
      state = dal_state_from_json(j.at("state"));
      store = Datastore::load(dir / state.datastore_version);
      if (fs::exists(dir / "progress.json")) {
        auto p = detail::progress_from_json(nlohmann::json::parse(read_file_text(dir / "progress.json")));
        if (p.iteration == state.iteration + 1) progress = std::move(p);
      }
    } else {
      fs::create_directories(dir);
      fs::remove(dir / "progress.json");
      store.save(dir / state.datastore_version);
      write_json(dir / "state.json", {{"run_fingerprint", run_fp}, {"state", to_json(state)}});
    }
  }

  CachingTextEmbedder embedder(comps.embedder);
  const DalComponents cached{comps.map, comps.generator, embedder, comps.metric};
  const std::size_t chunk = std::max<std::size_t>(16, 4 * cfg.jobs);

  auto interrupted = [&](const ExternalServiceError& e) {
    return DalInterrupted(std::string(e.what()) + " (progress saved; resume from " + checkpoint->dir.string() + ")",
                          checkpoint->dir);
  };

  while (state.iteration < cfg.iterations) try {
    const std::size_t iter = state.iteration + 1;
    detail::Progress prog;
    if (progress) {
      prog = std::move(*progress);
      progress.reset();
    } else {
      prog.iteration = iter;
      prog.threshold =
          compute_threshold(val, store, cached, cfg, std::min(state.current_k, store.size()), iter);
    }
    auto save_progress = [&] {
      if (checkpoint) write_json(checkpoint->dir / "progress.json", detail::to_json(prog));
    };
    save_progress();

    // Caption training images against the frozen store version.
    while (prog.cursor < train.size()) {
      const std::size_t begin = prog.cursor;
      const std::size_t end = std::min(train.size(), begin + chunk);
      auto [results, failure] = detail::parallel_indexed<std::pair<ImageCandidates, std::vector<Vector>>>(
          end - begin, cfg.jobs, [&](std::size_t off) {
            const DalItem& item = train[begin + off];
            try {
              GenerationRequest req = cfg.generation;
              req.seed = derive_seed(cfg.generation.seed, iter, detail::Phase::train, item.image_id);
              const CaptionResult r = caption_image(item.image_vec, comps.map, store, cfg.prompt, comps.generator,
                                                    embedder, std::min(state.current_k, store.size()), req);
              std::vector<std::string> texts;
              for (const auto& c : r.candidates.candidates) texts.push_back(c.text);
              auto vecs = embed_preprocessed(embedder, comps.map, texts);
              const Vector aligned = apply_map(comps.map, item.image_vec);
              ImageCandidates scored{item.image_id, {}};
              for (std::size_t i = 0; i < texts.size(); ++i) {
                scored.candidates.push_back({texts[i], comps.metric.score({item, texts[i], vecs[i], aligned})});
              }
              return std::make_pair(std::move(scored), std::move(vecs));
            } catch (const Error& e) {
              rethrow_labeled(e, "image '" + item.image_id + "'");
            }
          });
      const std::size_t done = failure ? failure->first : results.size();
      for (std::size_t off = 0; off < done; ++off) {
        auto& [scored, vecs] = *results[off];
        prog.generated += scored.candidates.size();
        for (auto& a : filter_candidates(std::span(&scored, 1), prog.threshold, cfg.one_best_per_image)) {
          const Vector emb = vecs[a.candidate_index];
          prog.pending.push_back({std::move(a), emb});
        }
      }
      prog.cursor = begin + done;
      if (failure) {
        save_progress();
        std::rethrow_exception(failure->second);
      }
      save_progress();
    }

    // Grow the datastore with admitted captions.
    std::vector<Datastore::Addition> additions;
    for (const auto& p : prog.pending) {
      CaptionRecord rec;
      rec.caption_id =
          "syn-" + std::to_string(iter) + "-" + p.admission.image_id + "-" + std::to_string(p.admission.candidate_index);
      rec.text = p.admission.text;
      rec.embedding = p.embedding;
      rec.provenance = Provenance::synthetic;
      rec.dal_iteration = static_cast<std::uint32_t>(iter);
      rec.source_image_id = p.admission.image_id;
      additions.push_back({std::move(rec), AuditEntry{p.admission.score, prog.threshold, comps.metric.name()}});
    }
    if (!additions.empty()) store = store.add_synthetic(std::move(additions));

    IterationReport report;
    report.iteration = iter;
    report.threshold = prog.threshold;
    report.candidates_generated = prog.generated;
    report.candidates_added = prog.pending.size();

    const KSearchResult ks = search_k(val, store, cached, cfg, cfg.k_grid, iter);
    report.chosen_k = ks.best_k;
    report.k_scores = ks.scores;
    report.notes = ks.notes;

    const std::size_t eval_k = std::min(ks.best_k, store.size());
    const ValidationRun run = evaluate_items(val, store, cached, cfg, eval_k, iter, detail::Phase::k_search, comps.metric);
    report.validation_mean = run.summary.mean;
    report.validation_stderr = run.summary.standard_error;
    report.validation_scores[comps.metric.name()] = run.summary.mean;
    {
      std::vector<double> a, ra;
      for (std::size_t i = 0; i < val.size(); ++i) {
        const std::vector<std::string> text{run.captions[i].caption};
        const Vector cand = embed_preprocessed(embedder, comps.map, text).front();
        const Vector aligned = apply_map(comps.map, val[i].image_vec);
        a.push_back(aclip_s_aligned(cand, aligned));
        if (!val[i].refs.embeddings.empty()) {
          ra.push_back(harmonic_mean2(a.back(), best_reference_similarity(cand, val[i].refs)));
        }
      }
      report.validation_scores["aclip"] = aggregate(a).mean;
      if (ra.size() == val.size()) report.validation_scores["ref_aclip"] = aggregate(ra).mean;
    }

    state.iteration = iter;
    state.threshold = prog.threshold;
    state.current_k = ks.best_k;
    state.datastore_version = detail::store_version_name(iter);
    state.history.push_back(report);

    if (checkpoint) {
      const fs::path& dir = checkpoint->dir;
      store.save(dir / state.datastore_version);
      write_json(dir / ("report_" + std::to_string(iter) + ".json"), to_json(report));
      write_json(dir / "state.json", {{"run_fingerprint", run_fp}, {"state", to_json(state)}});
      fs::remove(dir / "progress.json");
    }
  } catch (const DalInterrupted&) {
    throw;
  } catch (const ExternalServiceError& e) {
    if (!checkpoint) throw;
    throw interrupted(e);
  }
  return {std::move(store), std::move(state.history)};
}

}  // namespace recap

// recap: command-line front end for alignment, retrieval captioning, metrics and
// datastore augmentation. Run `recap --help` or `recap <command> --help`.

#include "recap/recap.hpp"
#include "recap/http_clients.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* formats_help = R"(File formats (all little-endian):

  EMBX embedding file
    magic "EMBX" | u32 version=1 | u8 dtype (0=f32) | u8 modality (0=image, 1=text)
    | u32 d | u64 count | count x (u16 len | len bytes UTF-8 id) | count*d f32 row-major
    | u32 CRC-32 of the f32 block

  ALNW alignment map
    magic "ALNW" | u32 version=1 | u8 kind (0=identity, 1=procrustes, 2=ols)
    | u8 scheme (0=none, 1=normalize_center_renormalize) | u32 d
    | d f64 image mean | d f64 text mean | d*d f64 row-major W
    | u32 CRC-32 of every preceding byte

  datastore directory
    manifest.json   {"format_version":1, "dataset_tag", "map_fingerprint", "d",
                     "counts":{"human","synthetic","total"}, "files":{name:{"bytes","crc32"}},
                     "manifest_crc32": CRC-32 of the compact dump of all other keys}
    records.jsonl   {"caption_id","text","provenance":"human"|"synthetic","dal_iteration","source_image_id"|null}
    embeddings.embx text-modality EMBX, rows aligned with records.jsonl
    audit.jsonl     {"caption_id","score","threshold","metric"}, one line per synthetic caption

  pairs CSV            header image_id,caption_id
  metric CSV           header id,metric_name,value (long format)
  judgments JSONL      {"id"?, "image_id", "candidate", "human_score", "metric_scores"?:{name:value}}
  captions JSONL       {"caption_id", "text", "source_image_id"?}
  references JSONL     {"image_id", "references":[text,...]}
  candidates JSONL     {"image_id", "candidate", "references"?:[text,...]}

Exit codes: 0 ok, 2 invalid input, 3 numerical failure, 4 external service
unavailable, 5 internal error.
)";

// Collected while a command runs; written once at exit.
struct Invocation {
  recap::RunManifest manifest;
  std::optional<fs::path> manifest_path;
  std::optional<fs::path> primary_output;

  void input(const fs::path& p) {
    if (fs::exists(p)) manifest.add_input(p);
  }
  void output(const fs::path& p) {
    manifest.outputs.push_back(p.string());
    if (!primary_output) primary_output = p;
  }
};

json options_json(const CLI::App& app) {
  json out = json::object();
  for (const CLI::Option* opt : app.get_options()) {
    if (opt->get_name() == "--help" || opt->get_name() == "--help-all") continue;
    std::string name = opt->get_name(false, true);
    if (name.empty()) name = opt->get_name();
    while (!name.empty() && name.front() == '-') name.erase(name.begin());
    if (opt->count() > 0) {
      const auto& r = opt->results();
      out[name] = r.size() == 1 ? json(r.front()) : json(r);
    } else if (!opt->get_default_str().empty()) {
      out[name] = opt->get_default_str();
    }
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path == "-") {
    std::cout << text;
    return;
  }
  recap::write_file_text(path, text);
}

void write_json_file(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string pct2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

recap::RetryPolicy retry_policy(int attempts, int backoff_ms) {
  recap::RetryPolicy r;
  r.attempts = attempts;
  r.initial_backoff = std::chrono::milliseconds(backoff_ms);
  return r;
}

recap::AlignmentMap load_map(Invocation& inv, const fs::path& p) {
  inv.input(p);
  return recap::alnw::load(p);
}

recap::EmbeddingMatrix load_embx(Invocation& inv, const fs::path& p) {
  inv.input(p);
  return recap::embx::load(p);
}

recap::Datastore load_store(Invocation& inv, const fs::path& dir, const recap::AlignmentMap& map, bool allow_mismatch) {
  inv.input(dir);
  auto store = recap::Datastore::load(dir);
  const auto& fp = store.manifest().map_fingerprint;
  if (store.dim() != map.dim()) {
    throw recap::ValidationError("datastore d=" + std::to_string(store.dim()) + " but map d=" +
                                 std::to_string(map.dim()));
  }
  if (!fp.empty() && fp != recap::fingerprint(map) && !allow_mismatch) {
    throw recap::ValidationError("datastore " + dir.string() +
                                 " was built with a different alignment map (pass --allow-map-mismatch to override)");
  }
  return store;
}

// Rows of `m` in the order given by `ids`; unknown ids are an input error.
recap::EmbeddingMatrix rows_for(const recap::EmbeddingMatrix& m, const std::vector<std::string>& ids,
                                const std::string& what) {
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (const auto& id : ids) {
    auto r = m.find(id);
    if (!r) throw recap::ValidationError(what + ": unknown id '" + id + "'");
    rows.push_back(*r);
  }
  return recap::gather_rows(m, rows);
}

// ---------------------------------------------------------------- fit

struct FitOptions {
  std::string images, texts, pairs, method = "procrustes", scheme = "normalize_center_renormalize", out, report;
};

void run_fit(const FitOptions& o, Invocation& inv) {
  const auto method = recap::parse_fit_method(o.method);
  const auto scheme = recap::parse_scheme(o.scheme);
  auto images = load_embx(inv, o.images);
  auto texts = load_embx(inv, o.texts);
  if (images.dim() != texts.dim()) {
    throw recap::ValidationError("dimension mismatch: images d=" + std::to_string(images.dim()) + " vs texts d=" +
                                 std::to_string(texts.dim()));
  }
  std::string fitted_on = fs::path(o.images).filename().string() + "+" + fs::path(o.texts).filename().string();
  if (!o.pairs.empty()) {
    inv.input(o.pairs);
    const auto pairs = recap::formats::read_pairs_csv(o.pairs);
    std::vector<std::string> image_ids, caption_ids;
    for (const auto& p : pairs) {
      image_ids.push_back(p.image_id);
      caption_ids.push_back(p.caption_id);
    }
    images = rows_for(images, image_ids, o.images);
    texts = rows_for(texts, caption_ids, o.texts);
    fitted_on += "@" + fs::path(o.pairs).filename().string();
  } else if (images.rows() != texts.rows()) {
    throw recap::ValidationError("without --pairs the files must have equal row counts: images n=" +
                                 std::to_string(images.rows()) + " vs texts n=" + std::to_string(texts.rows()));
  }
  const std::size_t n = images.rows();
  const std::size_t d = images.dim();

  auto pre = recap::preprocess_fit(images, texts, scheme);
  const auto f = recap::preprocess_apply(pre, std::move(images));
  const auto e = recap::preprocess_apply(pre, std::move(texts));
  auto map = method == recap::FitMethod::procrustes ? recap::fit_procrustes(e, f, pre, fitted_on)
                                                    : recap::fit_ols(e, f, pre, fitted_on);
  const auto obj = recap::objective_values(map, e, f);

  recap::alnw::save(o.out, map);
  inv.output(o.out);
  const json report = {{"method", o.method},
                       {"scheme", recap::to_string(scheme)},
                       {"d", d},
                       {"n", n},
                       {"residual_sum", obj.residual_sum},
                       {"cosine_sum", obj.cosine_sum},
                       {"orthogonality_error", recap::orthogonality_error(map.weights)},
                       {"fingerprint", recap::fingerprint(map)}};
  const fs::path report_path = o.report.empty() ? fs::path(o.out + ".json") : fs::path(o.report);
  write_json_file(report_path, report);
  inv.output(report_path);
  std::cout << "fitted " << o.method << " map d=" << d << " n=" << n << " residual_sum=" << obj.residual_sum
            << " orthogonality_error=" << report["orthogonality_error"].get<double>() << "\n";
}

// ---------------------------------------------------------------- store build

struct StoreBuildOptions {
  std::string map, texts, captions, out, tag;
};

void run_store_build(const StoreBuildOptions& o, Invocation& inv) {
  const auto map = load_map(inv, o.map);
  const auto texts = load_embx(inv, o.texts);
  if (texts.dim() != map.dim()) {
    throw recap::ValidationError("dimension mismatch: map d=" + std::to_string(map.dim()) + " vs texts d=" +
                                 std::to_string(texts.dim()));
  }
  inv.input(o.captions);
  const auto captions = recap::formats::read_captions(o.captions);
  if (captions.empty()) throw recap::ValidationError(o.captions + ": no captions");
  std::vector<std::string> ids;
  for (const auto& c : captions) ids.push_back(c.caption_id);
  const auto pre = recap::preprocess_apply(map.preprocessor, rows_for(texts, ids, o.texts));
  std::vector<recap::CaptionRecord> records;
  records.reserve(captions.size());
  for (std::size_t i = 0; i < captions.size(); ++i) {
    recap::CaptionRecord r;
    r.caption_id = captions[i].caption_id;
    r.text = captions[i].text;
    r.embedding = pre.row(i).transpose();
    r.provenance = recap::Provenance::human;
    r.source_image_id = captions[i].source_image_id;
    records.push_back(std::move(r));
  }
  const auto store = recap::Datastore::build(std::move(records), o.tag, recap::fingerprint(map));
  store.save(o.out);
  inv.output(o.out);
  std::cout << "built datastore with " << store.size() << " captions, d=" << store.dim() << "\n";
}

// ---------------------------------------------------------------- caption

struct ServiceOptions {
  std::string generator_url, embedder_url;
  int retries = 3;
  int backoff_ms = 200;
};

struct CaptionOptions {
  std::string map, store, image_emb, out = "-";
  std::size_t k = 13, l = 10, max_tokens = 40, jobs = 1;
  double temperature = 0.1, top_p = 0.9;
  std::optional<std::int64_t> seed;
  std::string ordering = "worst_to_best";
  bool allow_map_mismatch = false;
  ServiceOptions svc;
};

void run_caption(const CaptionOptions& o, Invocation& inv) {
  const auto map = load_map(inv, o.map);
  const auto store = load_store(inv, o.store, map, o.allow_map_mismatch);
  const auto images = load_embx(inv, o.image_emb);
  if (images.dim() != map.dim()) {
    throw recap::ValidationError("dimension mismatch: map d=" + std::to_string(map.dim()) + " vs images d=" +
                                 std::to_string(images.dim()));
  }
  recap::PromptTemplate tmpl;
  tmpl.ordering = recap::parse_ordering(o.ordering);
  recap::GenerationRequest req;
  req.num_samples = o.l;
  req.temperature = o.temperature;
  req.top_p = o.top_p;
  req.max_tokens = o.max_tokens;
  req.seed = o.seed;
  recap::validate(req);

  const auto retry = retry_policy(o.svc.retries, o.svc.backoff_ms);
  recap::HttpGeneratorClient gen(o.svc.generator_url, retry);
  recap::HttpTextEmbedder http_embedder(o.svc.embedder_url, retry);
  recap::CachingTextEmbedder embedder(http_embedder);

  auto [results, failure] = recap::detail::parallel_indexed<recap::CaptionResult>(
      images.rows(), o.jobs, [&](std::size_t i) {
        return recap::caption_image(images.row(i).transpose(), map, store, tmpl, gen, embedder, o.k, req);
      });
  if (failure) {
    try {
      std::rethrow_exception(failure->second);
    } catch (const recap::Error& e) {
      std::cerr << "captioning image '" << images.ids()[failure->first] << "' failed\n";
      throw;
    }
  }
  std::string text;
  for (std::size_t i = 0; i < images.rows(); ++i) {
    json line = {{"image_id", images.ids()[i]}};
    line.update(recap::to_json(*results[i]));
    text += line.dump() + "\n";
  }
  write_text(o.out, text);
  if (o.out != "-") inv.output(o.out);
}

// ---------------------------------------------------------------- eval

struct TauOptions {
  std::string judgments, metrics_csv, variant = "both", out;
  std::vector<std::string> metrics;
};

// metric name -> id -> value, merged from the judgment file and an optional CSV.
recap::formats::MetricColumns metric_columns(const std::vector<recap::formats::Judgment>& js, const std::string& csv, Invocation& inv) {
  recap::formats::MetricColumns cols;
  for (const auto& j : js) {
    for (const auto& [name, v] : j.metric_scores) cols[name][j.id] = v;
  }
  if (!csv.empty()) {
    inv.input(csv);
    for (auto& [name, values] : recap::formats::read_metric_csv(csv)) {
      for (auto& [id, v] : values) {
        if (!cols[name].emplace(id, v).second) {
          throw recap::ValidationError("metric '" + name + "' given twice for id '" + id + "'");
        }
      }
    }
  }
  return cols;
}

void run_tau(const TauOptions& o, Invocation& inv) {
  if (o.variant != "b" && o.variant != "c" && o.variant != "both") {
    throw recap::ValidationError("--variant must be b, c or both");
  }
  inv.input(o.judgments);
  const auto js = recap::formats::read_judgments(o.judgments);
  if (js.size() < 2) throw recap::ValidationError(o.judgments + ": need at least 2 judgments");
  const auto cols = metric_columns(js, o.metrics_csv, inv);
  std::vector<std::string> names = o.metrics;
  if (names.empty()) {
    for (const auto& [name, _] : cols) names.push_back(name);
  }
  if (names.empty()) throw recap::ValidationError("no metric scores found");

  json out = json::object();
  for (const auto& name : names) {
    auto col = cols.find(name);
    if (col == cols.end()) throw recap::ValidationError("unknown metric '" + name + "'");
    std::vector<double> human, metric;
    for (const auto& j : js) {
      auto v = col->second.find(j.id);
      if (v == col->second.end()) {
        throw recap::ValidationError("judgment '" + j.id + "' has no score for metric '" + name + "'");
      }
      human.push_back(j.human_score);
      metric.push_back(v->second);
    }
    json entry = {{"n", human.size()}};
    if (o.variant != "c") {
      const double t = recap::kendall_tau_b(human, metric);
      entry["tau_b"] = t;
      std::cout << name << "\ttau_b\t" << pct2(t) << "\n";
    }
    if (o.variant != "b") {
      const double t = recap::kendall_tau_c(human, metric);
      entry["tau_c"] = t;
      std::cout << name << "\ttau_c\t" << pct2(t) << "\n";
    }
    out[name] = std::move(entry);
  }
  if (!o.out.empty()) {
    write_json_file(o.out, out);
    inv.output(o.out);
  }
}

struct RecallOptions {
  std::string map, images, texts, pairs, out;
  std::vector<std::size_t> ks = {1, 5, 10};
};

void run_recall(const RecallOptions& o, Invocation& inv) {
  const auto images = load_embx(inv, o.images);
  const auto texts = load_embx(inv, o.texts);
  if (images.dim() != texts.dim()) {
    throw recap::ValidationError("dimension mismatch: images d=" + std::to_string(images.dim()) + " vs texts d=" +
                                 std::to_string(texts.dim()));
  }
  const auto map = o.map.empty() ? recap::identity_map(images.dim(), std::nullopt) : load_map(inv, o.map);
  if (map.dim() != images.dim()) {
    throw recap::ValidationError("dimension mismatch: map d=" + std::to_string(map.dim()) + " vs images d=" +
                                 std::to_string(images.dim()));
  }
  inv.input(o.pairs);
  const auto pairs = recap::formats::read_pairs_csv(o.pairs);
  std::unordered_map<std::string, std::vector<std::string>> gold;
  std::vector<std::string> query_ids;
  for (const auto& p : pairs) {
    auto& g = gold[p.image_id];
    if (g.empty()) query_ids.push_back(p.image_id);
    g.push_back(p.caption_id);
  }
  const auto pre = recap::preprocess_apply(map.preprocessor, texts);
  std::vector<recap::CaptionRecord> records;
  records.reserve(pre.rows());
  for (std::size_t i = 0; i < pre.rows(); ++i) {
    recap::CaptionRecord r;
    r.caption_id = pre.ids()[i];
    r.text = pre.ids()[i];
    r.embedding = pre.row(i).transpose();
    records.push_back(std::move(r));
  }
  const auto store = recap::Datastore::build(std::move(records));
  const auto reports = recap::recall_at_k(rows_for(images, query_ids, o.images), map, store, gold, o.ks);
  json out = json::array();
  for (const auto& r : reports) {
    std::cout << r.metric_name << "\t" << pct2(r.mean) << "\n";
    out.push_back(recap::to_json(r, false));
  }
  if (!o.out.empty()) {
    write_json_file(o.out, out);
    inv.output(o.out);
  }
}

struct ScoresOptions {
  std::string map, image_emb, candidates, out;
  ServiceOptions svc;
};

void run_scores(const ScoresOptions& o, Invocation& inv) {
  const auto map = load_map(inv, o.map);
  const auto images = load_embx(inv, o.image_emb);
  if (images.dim() != map.dim()) {
    throw recap::ValidationError("dimension mismatch: map d=" + std::to_string(map.dim()) + " vs images d=" +
                                 std::to_string(images.dim()));
  }
  inv.input(o.candidates);
  const auto lines = recap::formats::read_candidates(o.candidates);
  if (lines.empty()) throw recap::ValidationError(o.candidates + ": no candidates");
  for (const auto& c : lines) {
    if (!images.find(c.image_id)) throw recap::ValidationError("candidate for unknown image '" + c.image_id + "'");
  }

  recap::HttpTextEmbedder http_embedder(o.svc.embedder_url, retry_policy(o.svc.retries, o.svc.backoff_ms));
  recap::CachingTextEmbedder embedder(http_embedder);
  std::vector<std::string> cand_texts;
  for (const auto& c : lines) cand_texts.push_back(c.candidate);
  const auto cand_vecs = recap::embed_preprocessed(embedder, map, cand_texts);

  std::vector<std::pair<std::string, double>> aclip, ref_aclip;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& c = lines[i];
    const recap::Vector image = images.row(*images.find(c.image_id)).transpose();
    const recap::Vector aligned = recap::apply_map(map, image);
    const double a = recap::aclip_s_aligned(cand_vecs[i], aligned);
    aclip.emplace_back(c.image_id, a);
    if (!c.references.empty()) {
      recap::ReferenceSet refs{c.image_id, c.references, recap::embed_preprocessed(embedder, map, c.references)};
      ref_aclip.emplace_back(c.image_id, recap::harmonic_mean2(a, recap::best_reference_similarity(cand_vecs[i], refs)));
    }
  }
  json out = json::array();
  for (auto* items : {&aclip, &ref_aclip}) {
    if (items->empty()) continue;
    const auto report = recap::make_report(items == &aclip ? "aclip" : "ref_aclip", std::move(*items));
    std::cout << report.metric_name << "\tn=" << report.per_item.size() << "\tmean=" << pct2(report.mean)
              << "\tstderr=" << pct2(report.standard_error) << "\n";
    out.push_back(recap::to_json(report));
  }
  if (!o.out.empty()) {
    write_json_file(o.out, out);
    inv.output(o.out);
  }
}

struct PearsonOptions {
  std::string judgments, metrics_csv, out;
};

void run_pearson(const PearsonOptions& o, Invocation& inv) {
  if (o.judgments.empty() && o.metrics_csv.empty()) {
    throw recap::ValidationError("give --judgments and/or --metrics-csv");
  }
  std::vector<recap::formats::Judgment> js;
  if (!o.judgments.empty()) {
    inv.input(o.judgments);
    js = recap::formats::read_judgments(o.judgments);
  }
  auto cols = metric_columns(js, o.metrics_csv, inv);
  if (!js.empty()) {
    auto& human = cols["human"];
    for (const auto& j : js) human[j.id] = j.human_score;
  }
  // Only ids present in every column take part.
  std::set<std::string> common;
  bool first = true;
  for (const auto& [name, values] : cols) {
    std::set<std::string> ids;
    for (const auto& [id, _] : values) {
      if (first || common.count(id) != 0) ids.insert(id);
    }
    common = std::move(ids);
    first = false;
  }
  if (cols.size() < 2) throw recap::ValidationError("need at least two score columns");
  if (common.size() < 2) throw recap::ValidationError("fewer than two ids are scored by every column");
  std::vector<std::pair<std::string, std::vector<double>>> columns;
  for (const auto& [name, values] : cols) {
    std::vector<double> v;
    for (const auto& id : common) v.push_back(values.at(id));
    columns.emplace_back(name, std::move(v));
  }
  const auto m = recap::pearson_matrix(columns);
  json rows = json::array();
  std::cout << "metric";
  for (const auto& n : m.names) std::cout << "\t" << n;
  std::cout << "\n";
  for (Eigen::Index a = 0; a < m.values.rows(); ++a) {
    std::cout << m.names[static_cast<std::size_t>(a)];
    json row = json::array();
    for (Eigen::Index b = 0; b < m.values.cols(); ++b) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f", m.values(a, b));
      std::cout << "\t" << buf;
      row.push_back(m.values(a, b));
    }
    std::cout << "\n";
    rows.push_back(std::move(row));
  }
  if (!o.out.empty()) {
    write_json_file(o.out, {{"names", m.names}, {"n", common.size()}, {"matrix", rows}});
    inv.output(o.out);
  }
}

// ---------------------------------------------------------------- dal

struct DalOptions {
  std::string config, resume;
  std::optional<std::size_t> iterations, jobs;
  std::optional<std::int64_t> seed;
  std::string generator_url, embedder_url, out;
  int retries = 3;
  int backoff_ms = 200;
};

// Makes every path in the config absolute relative to `base`.
json resolve_paths(json cfg, const fs::path& base) {
  auto fix = [&](json& node, const char* key) {
    if (node.is_object() && node.contains(key) && node[key].is_string()) {
      fs::path p = node[key].get<std::string>();
      if (p.is_relative()) node[key] = fs::absolute(base / p).lexically_normal().string();
    }
  };
  fix(cfg, "map");
  fix(cfg, "store");
  fix(cfg, "out");
  for (const char* split : {"train", "val"}) {
    if (cfg.contains(split)) {
      fix(cfg[split], "images");
      fix(cfg[split], "references");
    }
  }
  if (cfg.contains("metric")) fix(cfg["metric"], "judgments");
  return cfg;
}

recap::DalConfig dal_config_from_json(const json& j) {
  recap::DalConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.initial_k = j.value("initial_k", c.initial_k);
  if (j.contains("k_grid")) c.k_grid = j.at("k_grid").get<std::vector<std::size_t>>();
  c.one_best_per_image = j.value("one_best_per_image", c.one_best_per_image);
  c.jobs = j.value("jobs", c.jobs);
  if (j.contains("generation")) {
    const auto& g = j.at("generation");
    c.generation.num_samples = g.value("num_samples", c.generation.num_samples);
    c.generation.temperature = g.value("temperature", c.generation.temperature);
    c.generation.top_p = g.value("top_p", c.generation.top_p);
    c.generation.max_tokens = g.value("max_tokens", c.generation.max_tokens);
    if (g.contains("seed") && !g.at("seed").is_null()) c.generation.seed = g.at("seed").get<std::int64_t>();
  }
  if (j.contains("prompt")) {
    const auto& p = j.at("prompt");
    c.prompt.prefix = p.value("prefix", c.prompt.prefix);
    c.prompt.separator = p.value("separator", c.prompt.separator);
    c.prompt.suffix = p.value("suffix", c.prompt.suffix);
    if (p.contains("ordering")) c.prompt.ordering = recap::parse_ordering(p.at("ordering").get<std::string>());
  }
  recap::validate(c);
  return c;
}

std::vector<recap::DalItem> dal_items(const json& split, const char* name, const recap::AlignmentMap& map,
                                      recap::TextEmbedder& embedder, bool need_refs, Invocation& inv) {
  if (!split.is_object() || !split.contains("images")) {
    throw recap::ValidationError(std::string("config: '") + name + "' needs an 'images' path");
  }
  const auto images = load_embx(inv, split.at("images").get<std::string>());
  if (images.dim() != map.dim()) {
    throw recap::ValidationError(std::string(name) + " images d=" + std::to_string(images.dim()) + " but map d=" +
                                 std::to_string(map.dim()));
  }
  std::unordered_map<std::string, std::vector<std::string>> refs;
  if (split.contains("references")) {
    const std::string path = split.at("references").get<std::string>();
    inv.input(path);
    for (auto& [id, texts] : recap::formats::read_references(path)) refs[id] = std::move(texts);
  }
  std::vector<recap::DalItem> items;
  items.reserve(images.rows());
  for (std::size_t i = 0; i < images.rows(); ++i) {
    recap::DalItem item;
    item.image_id = images.ids()[i];
    item.image_vec = images.row(i).transpose();
    item.refs.image_id = item.image_id;
    if (auto it = refs.find(item.image_id); it != refs.end()) {
      item.refs.references = it->second;
      item.refs.embeddings = recap::embed_preprocessed(embedder, map, it->second);
    } else if (need_refs) {
      throw recap::ValidationError(std::string(name) + " image '" + item.image_id + "' has no references");
    }
    items.push_back(std::move(item));
  }
  if (items.empty()) throw recap::ValidationError(std::string(name) + ": no images");
  return items;
}

std::unique_ptr<recap::CaptionMetric> dal_metric(const json& cfg, Invocation& inv) {
  const json m = cfg.value("metric", json("aclip"));
  if (m.is_string()) {
    const auto name = m.get<std::string>();
    if (name == "aclip") return std::make_unique<recap::AclipMetric>();
    if (name == "ref_aclip") return std::make_unique<recap::RefAclipMetric>();
    throw recap::ValidationError("config: unknown metric '" + name + "' (aclip, ref_aclip or an external table)");
  }
  if (!m.is_object() || !m.contains("judgments") || !m.contains("name")) {
    throw recap::ValidationError("config: external metric needs 'judgments' and 'name'");
  }
  const auto path = m.at("judgments").get<std::string>();
  const auto name = m.at("name").get<std::string>();
  inv.input(path);
  std::unordered_map<std::string, double> table;
  for (const auto& j : recap::formats::read_judgments(path)) {
    auto it = j.metric_scores.find(name);
    if (it == j.metric_scores.end()) continue;
    table[recap::ExternalTableMetric::key(j.image_id, j.candidate)] = it->second;
  }
  if (table.empty()) throw recap::ValidationError(path + ": no scores for metric '" + name + "'");
  return std::make_unique<recap::ExternalTableMetric>(name, std::move(table));
}

void run_dal_command(const DalOptions& o, Invocation& inv) {
  json cfg;
  fs::path checkpoint_dir;
  const bool resuming = !o.resume.empty();
  if (!o.config.empty()) {
    inv.input(o.config);
    try {
      cfg = json::parse(recap::read_file_text(o.config));
    } catch (const json::parse_error& e) {
      throw recap::FormatError(o.config + ": " + e.what());
    }
    cfg = resolve_paths(std::move(cfg), fs::absolute(o.config).parent_path());
  } else if (resuming) {
    const fs::path snap = fs::path(o.resume) / "config.json";
    if (!fs::exists(snap)) throw recap::ValidationError(snap.string() + " not found; pass --config as well");
    cfg = json::parse(recap::read_file_text(snap));
  } else {
    throw recap::ValidationError("dal needs --config or --resume");
  }
  if (o.iterations) cfg["iterations"] = *o.iterations;
  if (o.jobs) cfg["jobs"] = *o.jobs;
  if (o.seed) cfg["generation"]["seed"] = *o.seed;
  if (!o.generator_url.empty()) cfg["generator_url"] = o.generator_url;
  if (!o.embedder_url.empty()) cfg["embedder_url"] = o.embedder_url;
  if (!o.out.empty()) cfg["out"] = fs::absolute(o.out).lexically_normal().string();
  for (const char* key : {"map", "store", "generator_url", "embedder_url", "out"}) {
    if (!cfg.contains(key)) throw recap::ValidationError(std::string("config: missing '") + key + "'");
  }
  inv.manifest.config["dal_config"] = cfg;

  const fs::path out = cfg.at("out").get<std::string>();
  if (!inv.manifest_path) inv.manifest_path = out / "run_manifest.json";
  checkpoint_dir = resuming ? fs::path(o.resume) : out / "checkpoint";
  const auto dcfg = dal_config_from_json(cfg);
  const auto map = load_map(inv, cfg.at("map").get<std::string>());
  auto store = load_store(inv, cfg.at("store").get<std::string>(), map, cfg.value("allow_map_mismatch", false));
  auto metric = dal_metric(cfg, inv);

  const auto retry = retry_policy(o.retries, o.backoff_ms);
  recap::HttpGeneratorClient gen(cfg.at("generator_url").get<std::string>(), retry);
  recap::HttpTextEmbedder http_embedder(cfg.at("embedder_url").get<std::string>(), retry);
  recap::CachingTextEmbedder embedder(http_embedder);

  const bool need_refs = metric->name() == "ref_aclip";
  const auto train = dal_items(cfg.value("train", json()), "train", map, embedder, need_refs, inv);
  const auto val = dal_items(cfg.value("val", json()), "val", map, embedder, need_refs, inv);

  fs::create_directories(checkpoint_dir);
  write_json_file(checkpoint_dir / "config.json", cfg);
  recap::DalComponents comps{map, gen, embedder, *metric};
  const auto result =
      recap::run_dal(dcfg, train, val, std::move(store), comps, recap::DalCheckpoint{checkpoint_dir, resuming});

  result.store.save(out / "store");
  json history = json::array();
  for (const auto& r : result.history) history.push_back(recap::to_json(r));
  write_json_file(out / "history.json", history);
  inv.output(out / "store");
  inv.output(out / "history.json");
  inv.output(checkpoint_dir);
  for (const auto& r : result.history) {
    std::cout << "iteration " << r.iteration << ": threshold=" << r.threshold << " added=" << r.candidates_added
              << "/" << r.candidates_generated << " k=" << r.chosen_k << " val_mean=" << r.validation_mean << "\n";
  }
  std::cout << "final datastore: " << result.store.manifest().human_count << " human + "
            << result.store.manifest().synthetic_count << " synthetic captions in " << (out / "store").string()
            << "\n";
}

// ---------------------------------------------------------------- main

fs::path manifest_location(const Invocation& inv) {
  if (inv.manifest_path) return *inv.manifest_path;
  if (inv.primary_output) {
    fs::path p = *inv.primary_output;
    if (p.filename().empty()) p = p.parent_path();
    return p.string() + ".manifest.json";
  }
  return "recap-manifest.json";
}

void add_service_options(CLI::App* cmd, ServiceOptions& svc, bool generator) {
  if (generator) {
    cmd->add_option("--generator-url", svc.generator_url, "Base URL of the bridge serving POST /v1/generate")
        ->required();
  }
  cmd->add_option("--embedder-url", svc.embedder_url, "Base URL of the bridge serving POST /v1/embed")->required();
  cmd->add_option("--retries", svc.retries, "Attempts per request on transport failure")
      ->capture_default_str()
      ->check(CLI::Range(1, 20));
  cmd->add_option("--retry-backoff-ms", svc.backoff_ms, "Initial backoff between attempts")
      ->capture_default_str()
      ->check(CLI::Range(0, 60000));
}

}  // namespace

int main(int argc, char** argv) {
  const auto t0 = std::chrono::steady_clock::now();
  Invocation inv;
  inv.manifest.started_at = recap::utc_timestamp();
  for (int i = 0; i < argc; ++i) inv.manifest.command_line.emplace_back(argv[i]);

  CLI::App app{"recap: alignment, retrieval-augmented captioning, caption metrics and datastore augmentation"};
  app.footer(formats_help);
  app.set_config("--config-file", "", "TOML/INI file supplying option values; command-line flags win");
  app.require_subcommand(1);
  std::string manifest_path;
  app.add_option("--manifest", manifest_path, "Where to write the run manifest (default: next to the main output)");

  FitOptions fit;
  auto* fit_cmd = app.add_subcommand("fit", "Fit an image->text alignment map on paired embeddings");
  fit_cmd->add_option("--images", fit.images, "Image EMBX file")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--texts", fit.texts, "Text EMBX file")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--pairs", fit.pairs, "CSV image_id,caption_id; rows are paired by position without it")
      ->check(CLI::ExistingFile);
  fit_cmd->add_option("--method", fit.method, "procrustes | ols")->capture_default_str();
  fit_cmd->add_option("--scheme", fit.scheme, "none | normalize_center_renormalize (alias: center)")->capture_default_str();
  fit_cmd->add_option("--out", fit.out, "Output ALNW file")->required();
  fit_cmd->add_option("--report", fit.report, "Fit report JSON (default: <out>.json)");

  StoreBuildOptions sb;
  auto* store_cmd = app.add_subcommand("store", "Datastore utilities");
  store_cmd->require_subcommand(1);
  auto* build_cmd = store_cmd->add_subcommand("build", "Build a human-caption datastore");
  build_cmd->add_option("--map", sb.map, "ALNW map whose text preprocessing is applied")->required()->check(CLI::ExistingFile);
  build_cmd->add_option("--texts", sb.texts, "Text EMBX keyed by caption_id")->required()->check(CLI::ExistingFile);
  build_cmd->add_option("--captions", sb.captions, "Captions JSONL")->required()->check(CLI::ExistingFile);
  build_cmd->add_option("--out", sb.out, "Output datastore directory")->required();
  build_cmd->add_option("--tag", sb.tag, "Dataset tag recorded in the manifest");

  CaptionOptions cap;
  auto* cap_cmd = app.add_subcommand("caption", "Caption images by retrieval, prompting and candidate selection");
  cap_cmd->add_option("--map", cap.map, "ALNW map")->required()->check(CLI::ExistingFile);
  cap_cmd->add_option("--store", cap.store, "Datastore directory")->required()->check(CLI::ExistingDirectory);
  cap_cmd->add_option("--image-emb", cap.image_emb, "Image EMBX file")->required()->check(CLI::ExistingFile);
  cap_cmd->add_option("--out", cap.out, "Output JSONL ('-' for stdout)")->capture_default_str();
  cap_cmd->add_option("--k", cap.k, "Retrieved captions per prompt")->capture_default_str()->check(CLI::PositiveNumber);
  cap_cmd->add_option("--l", cap.l, "Candidates sampled per image")->capture_default_str()->check(CLI::PositiveNumber);
  cap_cmd->add_option("--temperature", cap.temperature)->capture_default_str();
  cap_cmd->add_option("--top-p", cap.top_p)->capture_default_str();
  cap_cmd->add_option("--max-tokens", cap.max_tokens)->capture_default_str()->check(CLI::PositiveNumber);
  cap_cmd->add_option("--seed", cap.seed, "Sampling seed forwarded to the generator");
  cap_cmd->add_option("--ordering", cap.ordering, "worst_to_best | best_to_worst")->capture_default_str();
  cap_cmd->add_option("--jobs", cap.jobs, "Parallel requests")->capture_default_str()->check(CLI::PositiveNumber);
  cap_cmd->add_flag("--allow-map-mismatch", cap.allow_map_mismatch, "Accept a store built with another map");
  add_service_options(cap_cmd, cap.svc, true);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluation utilities");
  eval_cmd->require_subcommand(1);

  TauOptions tau;
  auto* tau_cmd = eval_cmd->add_subcommand("tau", "Kendall tau between human judgments and metric scores (x100)");
  tau_cmd->add_option("--judgments", tau.judgments, "Judgments JSONL")->required()->check(CLI::ExistingFile);
  tau_cmd->add_option("--metrics-csv", tau.metrics_csv, "Extra metric scores keyed by judgment id")
      ->check(CLI::ExistingFile);
  tau_cmd->add_option("--metric", tau.metrics, "Metric to report (repeatable; default all)");
  tau_cmd->add_option("--variant", tau.variant, "b | c | both")->capture_default_str();
  tau_cmd->add_option("--out", tau.out, "JSON output with raw coefficients");

  RecallOptions rec;
  auto* rec_cmd = eval_cmd->add_subcommand("recall", "Image->text retrieval recall at k");
  rec_cmd->add_option("--map", rec.map, "ALNW map (identity when omitted)")->check(CLI::ExistingFile);
  rec_cmd->add_option("--images", rec.images, "Image EMBX (queries)")->required()->check(CLI::ExistingFile);
  rec_cmd->add_option("--texts", rec.texts, "Text EMBX (gallery)")->required()->check(CLI::ExistingFile);
  rec_cmd->add_option("--pairs", rec.pairs, "Gold CSV image_id,caption_id")->required()->check(CLI::ExistingFile);
  rec_cmd->add_option("--ks", rec.ks, "k values")->capture_default_str()->delimiter(',');
  rec_cmd->add_option("--out", rec.out, "JSON output");

  ScoresOptions sc;
  auto* sc_cmd = eval_cmd->add_subcommand("scores", "aCLIP-S and RefaCLIP-S for candidate captions");
  sc_cmd->add_option("--map", sc.map, "ALNW map")->required()->check(CLI::ExistingFile);
  sc_cmd->add_option("--image-emb", sc.image_emb, "Image EMBX")->required()->check(CLI::ExistingFile);
  sc_cmd->add_option("--candidates", sc.candidates, "Candidates JSONL")->required()->check(CLI::ExistingFile);
  sc_cmd->add_option("--out", sc.out, "JSON output with per-item scores");
  add_service_options(sc_cmd, sc.svc, false);

  PearsonOptions pe;
  auto* pe_cmd = eval_cmd->add_subcommand("pearson", "Pearson correlation matrix across metrics");
  pe_cmd->add_option("--judgments", pe.judgments, "Judgments JSONL (adds a 'human' column)")
      ->check(CLI::ExistingFile);
  pe_cmd->add_option("--metrics-csv", pe.metrics_csv, "Metric CSV")->check(CLI::ExistingFile);
  pe_cmd->add_option("--out", pe.out, "JSON output");

  DalOptions dal;
  auto* dal_cmd = app.add_subcommand("dal", "Grow the datastore with filtered synthetic captions");
  dal_cmd->footer(R"(The --config JSON object:
  {"map": path, "store": dir, "out": dir,
   "train": {"images": embx, "references": jsonl?},
   "val":   {"images": embx, "references": jsonl?},
   "generator_url": url, "embedder_url": url,
   "metric": "aclip" | "ref_aclip" | {"judgments": jsonl, "name": metric},
   "iterations": 5, "initial_k": 13, "k_grid": [1..17],
   "generation": {"num_samples": 10, "temperature": 0.1, "top_p": 0.9, "max_tokens": 40, "seed": int?},
   "prompt": {"prefix", "separator", "suffix", "ordering"},
   "one_best_per_image": true, "jobs": 1}
Relative paths resolve against the config file's directory. Checkpoints go to
<out>/checkpoint; resume with --resume <out>/checkpoint.)");
  dal_cmd->add_option("--config", dal.config, "JSON run configuration")->check(CLI::ExistingFile);
  dal_cmd->add_option("--resume", dal.resume, "Checkpoint directory to continue")->check(CLI::ExistingDirectory);
  dal_cmd->add_option("--iterations", dal.iterations, "Override iterations");
  dal_cmd->add_option("--jobs", dal.jobs, "Override jobs");
  dal_cmd->add_option("--seed", dal.seed, "Override the base sampling seed");
  dal_cmd->add_option("--generator-url", dal.generator_url, "Override generator_url");
  dal_cmd->add_option("--embedder-url", dal.embedder_url, "Override embedder_url");
  dal_cmd->add_option("--out", dal.out, "Override out");
  dal_cmd->add_option("--retries", dal.retries, "Attempts per request on transport failure")
      ->capture_default_str()
      ->check(CLI::Range(1, 20));
  dal_cmd->add_option("--retry-backoff-ms", dal.backoff_ms)->capture_default_str()->check(CLI::Range(0, 60000));

  auto finish = [&](int rc) {
    inv.manifest.exit_code = rc;
    inv.manifest.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    try {
      recap::write_file_text(manifest_location(inv), inv.manifest.to_json().dump(2) + "\n");
    } catch (const std::exception& e) {
      std::cerr << "warning: could not write run manifest: " << e.what() << "\n";
    }
    return rc;
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (app.exit(e) == 0) return 0;
    return finish(static_cast<int>(recap::ErrorKind::validation));
  }

  if (!manifest_path.empty()) inv.manifest_path = manifest_path;
  int rc = 0;
  try {
    if (fit_cmd->parsed()) {
      inv.manifest.config = {{"command", "fit"}, {"options", options_json(*fit_cmd)}};
      run_fit(fit, inv);
    } else if (build_cmd->parsed()) {
      inv.manifest.config = {{"command", "store build"}, {"options", options_json(*build_cmd)}};
      run_store_build(sb, inv);
    } else if (cap_cmd->parsed()) {
      inv.manifest.config = {{"command", "caption"}, {"options", options_json(*cap_cmd)}};
      run_caption(cap, inv);
    } else if (tau_cmd->parsed()) {
      inv.manifest.config = {{"command", "eval tau"}, {"options", options_json(*tau_cmd)}};
      run_tau(tau, inv);
    } else if (rec_cmd->parsed()) {
      inv.manifest.config = {{"command", "eval recall"}, {"options", options_json(*rec_cmd)}};
      run_recall(rec, inv);
    } else if (sc_cmd->parsed()) {
      inv.manifest.config = {{"command", "eval scores"}, {"options", options_json(*sc_cmd)}};
      run_scores(sc, inv);
    } else if (pe_cmd->parsed()) {
      inv.manifest.config = {{"command", "eval pearson"}, {"options", options_json(*pe_cmd)}};
      run_pearson(pe, inv);
    } else if (dal_cmd->parsed()) {
      inv.manifest.config = {{"command", "dal"}, {"options", options_json(*dal_cmd)}};
      run_dal_command(dal, inv);
    }
  } catch (const recap::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    rc = e.exit_code();
  } catch (const std::bad_alloc&) {
    std::cerr << "error: out of memory\n";
    rc = static_cast<int>(recap::ErrorKind::internal);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    rc = static_cast<int>(recap::ErrorKind::internal);
  }

  return finish(rc);
}

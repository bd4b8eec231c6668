#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "recap/align.hpp"
#include "recap/embedding.hpp"
#include "recap/error.hpp"
#include "recap/vecstore.hpp"

namespace recap {

struct ReferenceSet {
  std::string image_id;
  std::vector<std::string> references;
  std::vector<Vector> embeddings;  // preprocessed, row-aligned with references
};

struct Aggregate {
  double mean = 0.0;
  double standard_error = 0.0;
};

/// Mean and standard error (sample standard deviation / sqrt(n)).
inline Aggregate aggregate(std::span<const double> values) {
  if (values.empty()) throw ValidationError("aggregate: empty input");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

struct ScoreReport {
  std::string metric_name;
  std::vector<std::pair<std::string, double>> per_item;
  double mean = 0.0;
  double standard_error = 0.0;
};

inline ScoreReport make_report(std::string metric_name, std::vector<std::pair<std::string, double>> per_item) {
  std::vector<double> values;
  values.reserve(per_item.size());
  for (const auto& [id, v] : per_item) values.push_back(v);
  const Aggregate a = aggregate(values);
  return {std::move(metric_name), std::move(per_item), a.mean, a.standard_error};
}

inline nlohmann::json to_json(const ScoreReport& r, bool with_items = true) {
  nlohmann::json j = {{"metric", r.metric_name}, {"n", r.per_item.size()}, {"mean", r.mean}, {"stderr", r.standard_error}};
  if (with_items) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& [id, v] : r.per_item) items.push_back({{"id", id}, {"value", v}});
    j["per_item"] = std::move(items);
  }
  return j;
}

inline double harmonic_mean2(double a, double b) { return (a == 0.0 || b == 0.0) ? 0.0 : 2.0 * a * b / (a + b); }

/// max{cos(candidate, aligned), 0} with an already-aligned image vector.
inline double aclip_s_aligned(const Eigen::Ref<const Vector>& candidate_vec, const Eigen::Ref<const Vector>& aligned) {
  if (candidate_vec.size() != aligned.size()) {
    throw ValidationError("aCLIP-S: candidate d=" + std::to_string(candidate_vec.size()) + ", image d=" +
                          std::to_string(aligned.size()));
  }
  require_finite(candidate_vec, "aCLIP-S candidate");
  return std::max(cosine(candidate_vec, aligned), 0.0);
}

/// Aligned CLIP score of a preprocessed text embedding against a raw image embedding.
inline double aclip_s(const Eigen::Ref<const Vector>& candidate_vec, const Eigen::Ref<const Vector>& image_vec,
                      const AlignmentMap& map) {
  return aclip_s_aligned(candidate_vec, apply_map(map, image_vec));
}

/// max{max_r cos(candidate, r), 0}
inline double best_reference_similarity(const Eigen::Ref<const Vector>& candidate_vec, const ReferenceSet& refs) {
  if (refs.embeddings.empty()) throw ValidationError("reference set for '" + refs.image_id + "' is empty");
  double best = -1.0;
  for (const auto& r : refs.embeddings) {
    if (r.size() != candidate_vec.size()) throw ValidationError("reference embedding dimension mismatch");
    best = std::max(best, cosine(candidate_vec, r));
  }
  return std::max(best, 0.0);
}

/// Harmonic mean of aCLIP-S and the clamped best reference similarity; 0 when either is 0.
inline double ref_aclip_s(const Eigen::Ref<const Vector>& candidate_vec, const ReferenceSet& refs,
                          const Eigen::Ref<const Vector>& image_vec, const AlignmentMap& map) {
  const double ref = best_reference_similarity(candidate_vec, refs);
  return harmonic_mean2(aclip_s(candidate_vec, image_vec, map), ref);
}

/// R@k for each k: fraction of queries whose top-k retrieved ids hit their gold set.
inline std::vector<ScoreReport> recall_at_k(const EmbeddingMatrix& queries, const AlignmentMap& map,
                                            const Datastore& store,
                                            const std::unordered_map<std::string, std::vector<std::string>>& gold,
                                            std::vector<std::size_t> ks = {1, 5, 10}) {
  if (ks.empty()) throw ValidationError("recall_at_k: no k values");
  std::sort(ks.begin(), ks.end());
  if (ks.front() == 0) throw ValidationError("recall_at_k: k must be >= 1");
  const EmbeddingMatrix aligned = apply_map(map, queries);
  std::vector<std::vector<std::pair<std::string, double>>> items(ks.size());
  for (std::size_t q = 0; q < aligned.rows(); ++q) {
    const auto& qid = aligned.ids()[q];
    auto it = gold.find(qid);
    if (it == gold.end() || it->second.empty()) throw ValidationError("query '" + qid + "' has no gold caption");
    std::unordered_set<std::size_t> gold_rows;
    for (const auto& g : it->second) {
      auto row = store.find(g);
      if (!row) throw ValidationError("gold caption '" + g + "' for query '" + qid + "' is not in the store");
      gold_rows.insert(*row);
    }
    const auto hits = store.topk(aligned.row(q).transpose(), ks.back());
    std::size_t first_hit = hits.size();
    for (std::size_t r = 0; r < hits.size(); ++r) {
      if (gold_rows.count(hits[r].index) != 0) {
        first_hit = r;
        break;
      }
    }
    for (std::size_t i = 0; i < ks.size(); ++i) items[i].emplace_back(qid, first_hit < ks[i] ? 1.0 : 0.0);
  }
  std::vector<ScoreReport> out;
  for (std::size_t i = 0; i < ks.size(); ++i) out.push_back(make_report("R@" + std::to_string(ks[i]), std::move(items[i])));
  return out;
}

/// Pair classification counts over all n(n-1)/2 pairs.
struct PairCounts {
  std::int64_t concordant = 0;
  std::int64_t discordant = 0;
  std::int64_t ties_x_only = 0;
  std::int64_t ties_y_only = 0;
  std::int64_t ties_both = 0;

  friend bool operator==(const PairCounts&, const PairCounts&) = default;
};

namespace detail {

inline void check_rank_inputs(std::span<const double> x, std::span<const double> y, const char* what) {
  if (x.size() != y.size()) {
    throw ValidationError(std::string(what) + ": length mismatch (" + std::to_string(x.size()) + " vs " +
                          std::to_string(y.size()) + ")");
  }
  if (x.size() < 2) throw ValidationError(std::string(what) + ": need at least 2 observations");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw ValidationError(std::string(what) + ": non-finite value");
  }
}

inline std::int64_t tied_pairs(std::span<const double> sorted) {
  std::int64_t total = 0;
  std::size_t run = 1;
  for (std::size_t i = 1; i <= sorted.size(); ++i) {
    if (i < sorted.size() && sorted[i] == sorted[i - 1]) {
      ++run;
    } else {
      total += static_cast<std::int64_t>(run) * static_cast<std::int64_t>(run - 1) / 2;
      run = 1;
    }
  }
  return total;
}

/// Sorts `v` ascending, returning the number of strict inversions.
inline std::int64_t merge_count_inversions(std::vector<double>& v) {
  std::vector<double> buf(v.size());
  std::int64_t inversions = 0;
  for (std::size_t width = 1; width < v.size(); width *= 2) {
    for (std::size_t lo = 0; lo < v.size(); lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, v.size());
      const std::size_t hi = std::min(lo + 2 * width, v.size());
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (v[j] < v[i]) {
          inversions += static_cast<std::int64_t>(mid - i);
          buf[k++] = v[j++];
        } else {
          buf[k++] = v[i++];
        }
      }
      while (i < mid) buf[k++] = v[i++];
      while (j < hi) buf[k++] = v[j++];
    }
    v.swap(buf);
  }
  return inversions;
}

}  // namespace detail

/// O(n log n) pair counts (Knight's algorithm).
inline PairCounts kendall_pair_counts(std::span<const double> x, std::span<const double> y) {
  detail::check_rank_inputs(x, y, "kendall");
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return x[a] != x[b] ? x[a] < x[b] : y[a] < y[b];
  });

  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = x[order[i]];
    ys[i] = y[order[i]];
  }
  const std::int64_t tx = detail::tied_pairs(xs);
  std::int64_t txy = 0;
  std::size_t run = 1;
  for (std::size_t i = 1; i <= n; ++i) {
    if (i < n && xs[i] == xs[i - 1] && ys[i] == ys[i - 1]) {
      ++run;
    } else {
      txy += static_cast<std::int64_t>(run) * static_cast<std::int64_t>(run - 1) / 2;
      run = 1;
    }
  }
  const std::int64_t discordant = detail::merge_count_inversions(ys);
  const std::int64_t ty = detail::tied_pairs(ys);
  const std::int64_t total = static_cast<std::int64_t>(n) * static_cast<std::int64_t>(n - 1) / 2;

  PairCounts c;
  c.discordant = discordant;
  c.concordant = total - tx - ty + txy - discordant;
  c.ties_x_only = tx - txy;
  c.ties_y_only = ty - txy;
  c.ties_both = txy;
  return c;
}

/// Tie-corrected Kendall tau-b.
inline double kendall_tau_b(std::span<const double> x, std::span<const double> y) {
  const PairCounts p = kendall_pair_counts(x, y);
  const std::int64_t c = p.concordant, d = p.discordant;
  const double denom = static_cast<double>(c + d + p.ties_x_only) * static_cast<double>(c + d + p.ties_y_only);
  if (denom == 0.0) throw ValidationError("kendall tau-b undefined: all pairs tied in x or y");
  return static_cast<double>(c - d) / std::sqrt(denom);
}

inline std::size_t distinct_values(std::span<const double> v) { return std::set<double>(v.begin(), v.end()).size(); }

/// Stuart's tau-c: 2m(C - D) / (n^2 (m - 1)), m = min(distinct x, distinct y).
inline double kendall_tau_c(std::span<const double> x, std::span<const double> y) {
  detail::check_rank_inputs(x, y, "kendall tau-c");
  const std::size_t mx = distinct_values(x);
  const std::size_t my = distinct_values(y);
  if (mx < 2) throw ValidationError("kendall tau-c undefined: x has fewer than 2 distinct values");
  if (my < 2) throw ValidationError("kendall tau-c undefined: y has fewer than 2 distinct values");
  const double m = static_cast<double>(std::min(mx, my));
  const double n = static_cast<double>(x.size());
  const PairCounts p = kendall_pair_counts(x, y);
  return 2.0 * m * static_cast<double>(p.concordant - p.discordant) / (n * n * (m - 1.0));
}

struct CorrelationMatrix {
  std::vector<std::string> names;
  Eigen::MatrixXd values;
};

/// Pairwise Pearson correlations between named, equal-length columns.
inline CorrelationMatrix pearson_matrix(const std::vector<std::pair<std::string, std::vector<double>>>& columns) {
  if (columns.empty()) throw ValidationError("pearson: no columns");
  const std::size_t n = columns.front().second.size();
  if (n < 2) throw ValidationError("pearson: need at least 2 observations");
  const auto k = static_cast<Eigen::Index>(columns.size());
  Eigen::MatrixXd centered(static_cast<Eigen::Index>(n), k);
  CorrelationMatrix out;
  for (Eigen::Index c = 0; c < k; ++c) {
    const auto& [name, values] = columns[static_cast<std::size_t>(c)];
    if (values.size() != n) throw ValidationError("pearson: column '" + name + "' has a different length");
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(values[i])) throw ValidationError("pearson: column '" + name + "' has a non-finite value");
      centered(static_cast<Eigen::Index>(i), c) = values[i] - mean;
    }
    if (centered.col(c).squaredNorm() == 0.0) throw ValidationError("pearson: column '" + name + "' is constant");
    out.names.push_back(name);
  }
  out.values = Eigen::MatrixXd::Identity(k, k);
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = a + 1; b < k; ++b) {
      const double r = centered.col(a).dot(centered.col(b)) /
                       std::sqrt(centered.col(a).squaredNorm() * centered.col(b).squaredNorm());
      out.values(a, b) = out.values(b, a) = std::clamp(r, -1.0, 1.0);
    }
  }
  return out;
}

}  // namespace recap

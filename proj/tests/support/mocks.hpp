#pragma once

// Deterministic stand-ins for the model bridge: hash-seeded embedders, a
// prompt-echoing generator, and a synthetic latent "world" whose images and
// captions share concepts.

#include <atomic>
#include <cstdint>
#include <map>
#include <mutex>
#include <random>
#include <regex>
#include <string>
#include <vector>

#include "recap/captioner.hpp"
#include "recap/dal.hpp"
#include "recap/error.hpp"

namespace mock {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline recap::Vector hash_vector(const std::string& key, std::size_t d, std::uint64_t seed = 0) {
  std::mt19937_64 rng(fnv1a(key) ^ seed);
  std::normal_distribution<double> n(0.0, 1.0);
  recap::Vector v(static_cast<Eigen::Index>(d));
  for (auto& x : v) x = n(rng);
  return v.normalized();
}

/// Unit vector seeded by the text hash.
class HashEmbedder : public recap::TextEmbedder {
 public:
  explicit HashEmbedder(std::size_t d, std::uint64_t seed = 0) : d_(d), seed_(seed) {}
  recap::RowMatrix embed(std::span<const std::string> texts) override {
    calls_.fetch_add(1);
    recap::RowMatrix out(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(d_));
    for (std::size_t i = 0; i < texts.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = hash_vector(texts[i], d_, seed_);
    return out;
  }
  std::size_t calls() const { return calls_.load(); }

 private:
  std::size_t d_;
  std::uint64_t seed_;
  std::atomic<std::size_t> calls_{0};
};

/// Returns fixed vectors for known strings; everything else is hashed.
class TableEmbedder : public recap::TextEmbedder {
 public:
  explicit TableEmbedder(std::size_t d) : d_(d) {}
  void set(const std::string& text, recap::Vector v) { table_[text] = std::move(v); }
  recap::RowMatrix embed(std::span<const std::string> texts) override {
    recap::RowMatrix out(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(d_));
    for (std::size_t i = 0; i < texts.size(); ++i) {
      auto it = table_.find(texts[i]);
      out.row(static_cast<Eigen::Index>(i)) = it != table_.end() ? it->second : hash_vector(texts[i], d_);
    }
    return out;
  }

 private:
  std::size_t d_;
  std::map<std::string, recap::Vector> table_;
};

/// Splits a rendered prompt back into its captions, most similar first.
inline std::vector<std::string> parse_prompt(const std::string& prompt, const recap::PromptTemplate& t = {}) {
  std::string body = prompt;
  if (body.rfind(t.prefix, 0) == 0) body = body.substr(t.prefix.size());
  if (body.size() >= t.suffix.size() && body.compare(body.size() - t.suffix.size(), t.suffix.size(), t.suffix) == 0) {
    body = body.substr(0, body.size() - t.suffix.size());
  }
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (true) {
    const auto next = body.find(t.separator, pos);
    parts.push_back(body.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
    if (next == std::string::npos) break;
    pos = next + t.separator.size();
  }
  if (t.ordering == recap::Ordering::worst_to_best) std::reverse(parts.begin(), parts.end());
  return parts;
}

/// Returns num_samples copies of the most similar retrieved caption.
class EchoGenerator : public recap::GeneratorClient {
 public:
  std::vector<std::string> generate(const recap::GenerationRequest& r) override {
    calls_.fetch_add(1);
    return std::vector<std::string>(r.num_samples, parse_prompt(r.prompt).front());
  }
  std::size_t calls() const { return calls_.load(); }

 private:
  std::atomic<std::size_t> calls_{0};
};

/// Cycles through the retrieved captions (most similar first); with `paraphrase`
/// every sample also gets a seed-dependent suffix so texts are new.
class CyclingGenerator : public recap::GeneratorClient {
 public:
  explicit CyclingGenerator(bool paraphrase = true) : paraphrase_(paraphrase) {}
  std::vector<std::string> generate(const recap::GenerationRequest& r) override {
    const auto parts = parse_prompt(r.prompt);
    std::vector<std::string> out;
    const std::uint64_t seed = r.seed ? static_cast<std::uint64_t>(*r.seed) : 0;
    for (std::size_t i = 0; i < r.num_samples; ++i) {
      std::string s = parts[i % parts.size()];
      if (paraphrase_) s += " v" + std::to_string((seed + 7919 * i) % 100000);
      out.push_back(std::move(s));
    }
    return out;
  }

 private:
  bool paraphrase_;
};

/// Returns whatever a callback produces.
template <typename Fn>
class FnGenerator : public recap::GeneratorClient {
 public:
  explicit FnGenerator(Fn fn) : fn_(std::move(fn)) {}
  std::vector<std::string> generate(const recap::GenerationRequest& r) override { return fn_(r); }

 private:
  Fn fn_;
};

/// Delegates to another generator, failing every call after `healthy_calls`.
class FlakyGenerator : public recap::GeneratorClient {
 public:
  FlakyGenerator(recap::GeneratorClient& inner, std::size_t healthy_calls) : inner_(inner), budget_(healthy_calls) {}
  std::vector<std::string> generate(const recap::GenerationRequest& r) override {
    if (calls_.fetch_add(1) >= budget_) throw recap::ExternalServiceError("generator outage (mock)");
    return inner_.generate(r);
  }

 private:
  recap::GeneratorClient& inner_;
  std::size_t budget_;
  std::atomic<std::size_t> calls_{0};
};

/// Constant-score metric.
class ConstantMetric : public recap::CaptionMetric {
 public:
  explicit ConstantMetric(double v) : v_(v) {}
  std::string name() const override { return "constant"; }
  double score(const recap::MetricInput&) const override { return v_; }

 private:
  double v_;
};

/// Synthetic bimodal world: concept c has latent z_c; images are A z_c + noise and
/// captions "c<id> ..." embed to B z_c + small text-specific noise.
struct LatentWorld {
  std::size_t d;
  std::size_t concepts;
  Eigen::MatrixXd image_basis;  // A
  Eigen::MatrixXd text_basis;   // B
  std::vector<recap::Vector> latents;
  double image_noise;
  double text_noise;

  LatentWorld(std::size_t dim, std::size_t num_concepts, std::uint64_t seed, double image_noise_sigma = 0.05,
              double text_noise_sigma = 0.05)
      : d(dim), concepts(num_concepts), image_noise(image_noise_sigma), text_noise(text_noise_sigma) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    auto orth = [&] {
      Eigen::MatrixXd g(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
      for (auto& x : g.reshaped()) x = n(rng);
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
      return Eigen::MatrixXd(qr.householderQ());
    };
    image_basis = orth();
    text_basis = orth();
    for (std::size_t c = 0; c < concepts; ++c) {
      recap::Vector z(static_cast<Eigen::Index>(d));
      for (auto& x : z) x = n(rng);
      latents.push_back(z.normalized());
    }
  }

  recap::Vector image(std::size_t topic, std::uint64_t instance) const {
    std::mt19937_64 rng(fnv1a("img" + std::to_string(topic) + "/" + std::to_string(instance)));
    std::normal_distribution<double> n(0.0, image_noise);
    recap::Vector v = image_basis * latents.at(topic);
    for (auto& x : v) x += n(rng);
    return v;
  }

  static std::string caption(std::size_t topic, std::size_t variant) {
    return "c" + std::to_string(topic) + " scene " + std::to_string(variant);
  }

  /// Concept parsed from a caption, or -1.
  static long concept_of(const std::string& text) {
    static const std::regex re("^c([0-9]+)\\b");
    std::smatch m;
    if (std::regex_search(text, m, re)) return std::stol(m[1]);
    return -1;
  }

  recap::Vector text(const std::string& s) const {
    const long c = concept_of(s);
    if (c < 0 || static_cast<std::size_t>(c) >= concepts) return hash_vector(s, d);
    recap::Vector v = text_basis * latents[static_cast<std::size_t>(c)];
    std::mt19937_64 rng(fnv1a(s));
    std::normal_distribution<double> n(0.0, text_noise);
    for (auto& x : v) x += n(rng);
    return v;
  }
};

class WorldEmbedder : public recap::TextEmbedder {
 public:
  explicit WorldEmbedder(const LatentWorld& w) : w_(w) {}
  recap::RowMatrix embed(std::span<const std::string> texts) override {
    recap::RowMatrix out(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(w_.d));
    for (std::size_t i = 0; i < texts.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = w_.text(texts[i]);
    return out;
  }

 private:
  const LatentWorld& w_;
};

}  // namespace mock

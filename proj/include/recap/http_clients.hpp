#pragma once

#include "recap/captioner.hpp"
#include "recap/error.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

// <resolv.h>, pulled in by httplib, defines _res as a macro; it collides with
// Eigen's internal parameter names in any header included afterwards.
#ifdef _res
#undef _res
#endif

#include <chrono>
#include <cmath>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace recap {

/// Transport failures are retried `attempts` times in total with exponential backoff.
struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{200};
  double multiplier = 2.0;
};

struct HttpEndpoint {
  std::string scheme_host_port;  // e.g. "http://127.0.0.1:8080"
  std::string path_prefix;       // e.g. "" or "/bridge"

  static HttpEndpoint parse(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos || url.substr(0, scheme_end) != "http") {
      throw ValidationError("unsupported URL '" + url + "' (expected http://host:port[/prefix])");
    }
    const auto path_start = url.find('/', scheme_end + 3);
    HttpEndpoint e;
    e.scheme_host_port = url.substr(0, path_start);
    if (path_start != std::string::npos) {
      e.path_prefix = url.substr(path_start);
      while (!e.path_prefix.empty() && e.path_prefix.back() == '/') e.path_prefix.pop_back();
    }
    if (e.scheme_host_port.size() <= scheme_end + 3) throw ValidationError("URL '" + url + "' has no host");
    return e;
  }
};

namespace detail {

/// POSTs JSON with retries on transport failure. Returns the parsed 200 body.
inline nlohmann::json post_json(const HttpEndpoint& endpoint, const std::string& path, const nlohmann::json& body,
                                const RetryPolicy& retry, std::chrono::seconds read_timeout, const char* service) {
  const std::string payload = body.dump();
  auto backoff = retry.initial_backoff;
  std::string last_error;
  for (int attempt = 1; attempt <= std::max(1, retry.attempts); ++attempt) {
    httplib::Client client(endpoint.scheme_host_port);
    client.set_connection_timeout(std::chrono::seconds(5));
    client.set_read_timeout(read_timeout);
    auto res = client.Post(endpoint.path_prefix + path, payload, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      if (attempt < retry.attempts) {
        std::this_thread::sleep_for(backoff);
        backoff = std::chrono::milliseconds(static_cast<long long>(std::llround(backoff.count() * retry.multiplier)));
      }
      continue;
    }
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception&) {
      throw ExternalServiceError(std::string(service) + ": malformed response (HTTP " + std::to_string(res->status) +
                                 ")");
    }
    if (res->status != 200) {
      std::string message = parsed.is_object() && parsed.contains("error") && parsed["error"].is_string()
                                ? parsed["error"].get<std::string>()
                                : res->body;
      throw ExternalServiceError(std::string(service) + " error (HTTP " + std::to_string(res->status) +
                                 "): " + message);
    }
    return parsed;
  }
  throw ExternalServiceError(std::string(service) + " unreachable at " + endpoint.scheme_host_port + " after " +
                             std::to_string(retry.attempts) + " attempts: " + last_error);
}

}  // namespace detail

/// POST {base}/v1/generate.
class HttpGeneratorClient : public GeneratorClient {
 public:
  explicit HttpGeneratorClient(const std::string& base_url, RetryPolicy retry = {},
                               std::chrono::seconds read_timeout = std::chrono::seconds(300))
      : endpoint_(HttpEndpoint::parse(base_url)), retry_(retry), read_timeout_(read_timeout) {}

  std::vector<std::string> generate(const GenerationRequest& request) override {
    const auto body = detail::post_json(endpoint_, "/v1/generate", to_json(request), retry_, read_timeout_, "generator");
    if (!body.is_object() || !body.contains("candidates") || !body["candidates"].is_array()) {
      throw ExternalServiceError("generator: response lacks a 'candidates' array");
    }
    std::vector<std::string> out;
    for (const auto& c : body["candidates"]) {
      if (!c.is_string()) throw ExternalServiceError("generator: non-string candidate");
      out.push_back(c.get<std::string>());
    }
    return out;
  }

 private:
  HttpEndpoint endpoint_;
  RetryPolicy retry_;
  std::chrono::seconds read_timeout_;
};

/// POST {base}/v1/embed, batched.
class HttpTextEmbedder : public TextEmbedder {
 public:
  explicit HttpTextEmbedder(const std::string& base_url, RetryPolicy retry = {}, std::size_t batch_size = 256)
      : endpoint_(HttpEndpoint::parse(base_url)), retry_(retry), batch_size_(std::max<std::size_t>(1, batch_size)) {}

  RowMatrix embed(std::span<const std::string> texts) override {
    try {
      return embed_batches(texts);
    } catch (const nlohmann::json::exception& e) {
      throw ExternalServiceError(std::string("embedder: malformed response: ") + e.what());
    }
  }

 private:
  RowMatrix embed_batches(std::span<const std::string> texts) {
    RowMatrix out;
    for (std::size_t begin = 0; begin < texts.size(); begin += batch_size_) {
      const auto batch = texts.subspan(begin, std::min(batch_size_, texts.size() - begin));
      const auto body = detail::post_json(endpoint_, "/v1/embed",
                                          {{"texts", std::vector<std::string>(batch.begin(), batch.end())}}, retry_,
                                          std::chrono::seconds(120), "embedder");
      if (!body.is_object() || !body.contains("dim") || !body.contains("vectors") || !body["vectors"].is_array()) {
        throw ExternalServiceError("embedder: response lacks 'dim'/'vectors'");
      }
      const auto dim = body["dim"].get<std::size_t>();
      const auto& vectors = body["vectors"];
      if (vectors.size() != batch.size()) {
        throw ExternalServiceError("embedder: got " + std::to_string(vectors.size()) + " vectors for " +
                                   std::to_string(batch.size()) + " texts");
      }
      if (begin == 0) {
        out.resize(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(dim));
      } else if (static_cast<std::size_t>(out.cols()) != dim) {
        throw ExternalServiceError("embedder: inconsistent dim across batches");
      }
      for (std::size_t i = 0; i < vectors.size(); ++i) {
        if (!vectors[i].is_array() || vectors[i].size() != dim) {
          throw ExternalServiceError("embedder: vector " + std::to_string(i) + " does not have dim entries");
        }
        for (std::size_t j = 0; j < dim; ++j) {
          const double v = vectors[i][j].get<double>();
          if (!std::isfinite(v)) throw ExternalServiceError("embedder: non-finite value");
          out(static_cast<Eigen::Index>(begin + i), static_cast<Eigen::Index>(j)) = v;
        }
      }
    }
    return out;
  }

  HttpEndpoint endpoint_;
  RetryPolicy retry_;
  std::size_t batch_size_;
};

}  // namespace recap

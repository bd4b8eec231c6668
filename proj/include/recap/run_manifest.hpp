#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "recap/binary_io.hpp"
#include "recap/checksum.hpp"

namespace recap {

inline constexpr const char* toolkit_version = "0.1.0";

/// Provenance record emitted once per CLI invocation.
struct RunManifest {
  std::vector<std::string> command_line;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::pair<std::string, std::string>> inputs;  // path -> sha256
  std::vector<std::string> outputs;
  std::string started_at;
  double wall_seconds = 0.0;
  int exit_code = 0;

  void add_input(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (fs::is_directory(path)) {
      // Hash the sorted (name, digest) listing for directories.
      std::vector<std::pair<std::string, std::string>> entries;
      for (const auto& e : fs::recursive_directory_iterator(path)) {
        if (e.is_regular_file()) {
          entries.emplace_back(fs::relative(e.path(), path).generic_string(), sha256_hex(read_file_bytes(e.path())));
        }
      }
      std::sort(entries.begin(), entries.end());
      inputs.emplace_back(path.string(), sha256_hex(nlohmann::json(entries).dump()));
    } else {
      inputs.emplace_back(path.string(), sha256_hex(read_file_bytes(path)));
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json in = nlohmann::json::array();
    for (const auto& [p, h] : inputs) in.push_back({{"path", p}, {"sha256", h}});
    return {{"toolkit_version", toolkit_version},
            {"command_line", command_line},
            {"config", config},
            {"inputs", std::move(in)},
            {"outputs", outputs},
            {"started_at", started_at},
            {"wall_seconds", wall_seconds},
            {"exit_code", exit_code}};
  }
};

inline std::string utc_timestamp(std::chrono::system_clock::time_point t = std::chrono::system_clock::now()) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace recap

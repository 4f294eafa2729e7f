#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace deepstack::cli {

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(std::string_view bytes);

/// Record of one invocation, written as manifest.json in its run directory.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::string version;
  std::map<std::string, std::string> input_hashes;  ///< path -> sha256
  std::string started;
  std::string finished;
  int exit_code = 0;

  void add_input(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void write(const std::filesystem::path& run_dir) const;
};

/// UTC timestamp, ISO 8601 with seconds.
std::string utc_now();

}  // namespace deepstack::cli

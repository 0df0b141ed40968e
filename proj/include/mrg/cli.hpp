#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace mrg::cli {

enum ExitCode : int { kSuccess = 0, kFailure = 1, kUsage = 2 };

/// Entry point of the `mrg` tool. Subcommands: synth, train, eval, generate,
/// gradcheck, ablate.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Flat `key = value` lines; `#` starts a comment. Keys are normalized to the
/// dashed flag spelling (lr, batch_size -> batch-size). Throws ConfigError on
/// malformed lines or duplicate keys.
std::vector<std::pair<std::string, std::string>> parse_flat_config(const std::string& text);
std::vector<std::pair<std::string, std::string>> read_flat_config(const std::filesystem::path& path);

/// SHA-1 of "blob <size>\0<bytes>", as git computes object ids.
std::string git_blob_sha1(std::span<const std::uint8_t> bytes);
std::string git_blob_sha1(const std::filesystem::path& path);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::ordered_json config;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::optional<std::string> checkpoint_hash;
  double duration_seconds = 0.0;

  nlohmann::ordered_json to_json() const;
  /// Written to `<primary output>.manifest.json`.
  static std::filesystem::path path_for(const std::filesystem::path& primary_output);
  void write(const std::filesystem::path& primary_output) const;
};

}  // namespace mrg::cli

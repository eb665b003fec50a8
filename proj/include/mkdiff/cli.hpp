#pragma once

#include "mkdiff/tasks.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mkdiff {

/// Bad command line or configuration; maps to exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  TrainConfig train;
  std::filesystem::path manifest;
  std::filesystem::path out;
  bool deterministic = false;
  int threads = 0;  // 0 = MKDIFF_THREADS or hardware concurrency
  /// Command-specific keys (ckpt, cloud, shapes, ...), already type-checked.
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
};

/// Every key accepted in a config file or as a `--<key>` flag.
const std::vector<std::string>& config_keys();

/// Resolves a flat JSON config file (optional) and string-valued flag
/// overrides into a RunConfig. Flags win over the file. Unknown keys and type
/// mismatches raise UsageError naming the key.
RunConfig parse_config(const std::optional<std::filesystem::path>& file,
                       const std::map<std::string, std::string>& overrides,
                       bool require_manifest = true);
RunConfig parse_config(const nlohmann::json& document,
                       const std::map<std::string, std::string>& overrides,
                       bool require_manifest = true);

/// Entry point of the `mkdiff` binary: 0 success, 1 usage error, 2 runtime
/// failure.
int run_command(int argc, const char* const* argv);
int run_command(const std::vector<std::string>& args);

}  // namespace mkdiff

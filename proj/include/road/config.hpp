#pragma once

#include "road/model.hpp"
#include "road/scene.hpp"
#include "road/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace road {

/// Everything a CLI invocation can configure. Sections of the config file
/// map to the members: [scene], [dataset], [model], [pretrain], [train],
/// [ablate].
struct RunConfig {
  SceneConfig scene{};
  int source_train = 200;
  int target_train = 200;
  int target_val = 50;
  PretrainConfig pretrain{};
  TrainConfig train{};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int jobs = 1;
};

/// "HxW" with ASCII 'x' and positive integers. ConfigError otherwise.
std::pair<int, int> parse_grid(const std::string& text);

/// "5" means seeds 0..4; "3,7,9" lists them.
std::vector<std::uint64_t> parse_seeds(const std::string& text);

/// Sets one key. Unknown sections or keys and malformed values are ConfigErrors.
void set_value(RunConfig& config, const std::string& section, const std::string& key, const std::string& value);

/// Reads `key = value` lines grouped by `[section]` headers; `#` and `;`
/// start comments.
void apply_ini(RunConfig& config, const std::string& text, const std::string& origin = "config");
RunConfig load_run_config(const std::filesystem::path& path);

/// The fully resolved config in the same format, readable by load_run_config.
std::string to_ini(const RunConfig& config);

/// Writes to_ini plus the code version to `dir/resolved.ini`.
void write_resolved_config(const RunConfig& config, const std::filesystem::path& dir);

inline constexpr const char* kCodeVersion = "road/1.0.0";

}  // namespace road

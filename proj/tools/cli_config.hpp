#pragma once

// JSON config schema shared by the CLI subcommands. Every command-line flag
// has a key of the same name (dashes become underscores); flags given on the
// command line override file values.

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "conslide/data.hpp"
#include "conslide/harness.hpp"

namespace conslide::cli {

/// Reads a JSON object; ConfigError on parse failure, FormatError(kIo) when missing.
nlohmann::json read_json_file(const std::filesystem::path& path);

/// Throws ConfigError naming the first key of `j` not in `known`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where);

nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, SyntheticSpec base = {});
/// "default" or "tcga-mirror".
SyntheticSpec synthetic_preset(const std::string& name);

struct GenerateSettings {
  std::string preset = "default";
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;
  std::size_t workers = 1;
  nlohmann::json synthetic = nlohmann::json::object();
};

struct TrainSettings {
  std::filesystem::path data;
  std::filesystem::path out;
  std::string preset = "conslide";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  nlohmann::json train = nlohmann::json::object();
  nlohmann::json model = nlohmann::json::object();
};

struct EvalSettings {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::string scenario = "class-incremental";
  std::filesystem::path rollout;  // empty disables
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::string preset;  // accepted for uniformity
};

struct InspectSettings {
  std::filesystem::path snapshot;
  std::filesystem::path out;  // optional CSV destination
  std::uint64_t seed = 0;     // recorded only
  std::size_t workers = 1;    // accepted for uniformity
  std::string preset;         // accepted for uniformity
};

GenerateSettings generate_settings_from_json(const nlohmann::json& j);
TrainSettings train_settings_from_json(const nlohmann::json& j);
EvalSettings eval_settings_from_json(const nlohmann::json& j);
InspectSettings inspect_settings_from_json(const nlohmann::json& j);

/// Effective configs: defaults, then the file's train section, then the preset,
/// then seed and workers overrides. Model channels and class count default to the data.
TrainConfig resolve_train_config(const TrainSettings& s);
HitConfig resolve_hit_config(const TrainSettings& s, std::size_t data_channels, std::size_t data_classes);

}  // namespace conslide::cli

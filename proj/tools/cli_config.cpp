#include "cli_config.hpp"

#include <fstream>
#include <set>

#include "conslide/errors.hpp"

namespace conslide::cli {

namespace fs = std::filesystem;
using nlohmann::json;

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrorCode::kIo, "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": top level must be an object");
  return j;
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> names(known.begin(), known.end());
  for (const auto& [k, v] : j.items())
    if (!names.count(k)) throw ConfigError(where + ": unknown key \"" + k + "\"");
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& field, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void read_path(const json& j, const char* key, fs::path& field, const std::string& where) {
  std::string s;
  if (!j.contains(key)) return;
  read(j, key, s, where);
  field = s;
}

void read_seed(const json& j, std::optional<std::uint64_t>& seed, const std::string& where) {
  if (!j.contains("seed")) return;
  std::uint64_t v = 0;
  read(j, "seed", v, where);
  seed = v;
}

void read_object(const json& j, const char* key, json& field, const std::string& where) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_object()) throw ConfigError(where + "." + key + ": expected an object");
  field = j.at(key);
}

}  // namespace

json to_json(const SyntheticSpec& s) {
  return {{"tasks", s.tasks},
          {"classes_per_task", s.classes_per_task},
          {"channels", s.channels},
          {"min_regions", s.min_regions},
          {"max_regions", s.max_regions},
          {"patches", s.patches},
          {"sigma_between", s.sigma_between},
          {"sigma_patch", s.sigma_patch},
          {"train_per_class", s.train_per_class},
          {"test_per_class", s.test_per_class},
          {"train_counts", s.train_counts},
          {"test_counts", s.test_counts},
          {"task_names", s.task_names},
          {"class_names", s.class_names},
          {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const json& j, SyntheticSpec s) {
  const std::string w = "synthetic";
  reject_unknown_keys(j,
                      {"tasks", "classes_per_task", "channels", "min_regions", "max_regions", "patches",
                       "sigma_between", "sigma_patch", "train_per_class", "test_per_class", "train_counts",
                       "test_counts", "task_names", "class_names", "seed"},
                      w);
  read(j, "tasks", s.tasks, w);
  read(j, "classes_per_task", s.classes_per_task, w);
  read(j, "channels", s.channels, w);
  read(j, "min_regions", s.min_regions, w);
  read(j, "max_regions", s.max_regions, w);
  read(j, "patches", s.patches, w);
  read(j, "sigma_between", s.sigma_between, w);
  read(j, "sigma_patch", s.sigma_patch, w);
  read(j, "train_per_class", s.train_per_class, w);
  read(j, "test_per_class", s.test_per_class, w);
  read(j, "train_counts", s.train_counts, w);
  read(j, "test_counts", s.test_counts, w);
  read(j, "task_names", s.task_names, w);
  read(j, "class_names", s.class_names, w);
  read(j, "seed", s.seed, w);
  s.validate();
  return s;
}

SyntheticSpec synthetic_preset(const std::string& name) {
  if (name == "default") return {};
  if (name == "tcga-mirror") return tcga_mirror_spec();
  throw ConfigError("unknown dataset preset \"" + name + "\" (expected default or tcga-mirror)");
}

GenerateSettings generate_settings_from_json(const json& j) {
  const std::string w = "generate config";
  reject_unknown_keys(j, {"preset", "seed", "out", "workers", "synthetic"}, w);
  GenerateSettings s;
  read(j, "preset", s.preset, w);
  read_seed(j, s.seed, w);
  read_path(j, "out", s.out, w);
  read(j, "workers", s.workers, w);
  read_object(j, "synthetic", s.synthetic, w);
  return s;
}

TrainSettings train_settings_from_json(const json& j) {
  const std::string w = "train config";
  reject_unknown_keys(j, {"data", "out", "preset", "seed", "workers", "train", "model"}, w);
  TrainSettings s;
  read_path(j, "data", s.data, w);
  read_path(j, "out", s.out, w);
  read(j, "preset", s.preset, w);
  read_seed(j, s.seed, w);
  if (j.contains("workers")) {
    std::size_t v = 0;
    read(j, "workers", v, w);
    s.workers = v;
  }
  read_object(j, "train", s.train, w);
  read_object(j, "model", s.model, w);
  return s;
}

EvalSettings eval_settings_from_json(const json& j) {
  const std::string w = "eval config";
  reject_unknown_keys(j, {"checkpoint", "manifest", "scenario", "rollout", "out", "seed", "workers", "preset"}, w);
  EvalSettings s;
  read_path(j, "checkpoint", s.checkpoint, w);
  read_path(j, "manifest", s.manifest, w);
  read(j, "scenario", s.scenario, w);
  read_path(j, "rollout", s.rollout, w);
  read_path(j, "out", s.out, w);
  read_seed(j, s.seed, w);
  read(j, "workers", s.workers, w);
  read(j, "preset", s.preset, w);
  return s;
}

InspectSettings inspect_settings_from_json(const json& j) {
  const std::string w = "inspect-buffer config";
  reject_unknown_keys(j, {"snapshot", "out", "seed", "workers", "preset"}, w);
  InspectSettings s;
  read_path(j, "snapshot", s.snapshot, w);
  read_path(j, "out", s.out, w);
  read(j, "seed", s.seed, w);
  read(j, "workers", s.workers, w);
  read(j, "preset", s.preset, w);
  return s;
}

TrainConfig resolve_train_config(const TrainSettings& s) {
  // The preset fixes the keys that define the method; other section keys stand.
  TrainConfig c = apply_preset(s.preset, train_config_from_json(s.train));
  if (s.seed) c.seed = *s.seed;
  if (s.workers) c.workers = *s.workers;
  c.validate();
  return c;
}

HitConfig resolve_hit_config(const TrainSettings& s, std::size_t data_channels, std::size_t data_classes) {
  HitConfig base;
  base.channels = data_channels;
  base.num_classes_total = data_classes;
  HitConfig h = hit_config_from_json(s.model, base);
  if (h.channels != data_channels)
    throw ConfigError("model.channels = " + std::to_string(h.channels) + " but the dataset has C = " +
                      std::to_string(data_channels));
  h.validate();
  return h;
}

}  // namespace conslide::cli

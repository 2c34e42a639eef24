// conslide: generate | train | eval | inspect-buffer
//
// Exit codes: 0 success, 2 configuration error, 3 IO or missing input,
// 4 numerical failure, 1 anything else.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>

#include "cli_config.hpp"
#include "conslide/buro.hpp"
#include "conslide/errors.hpp"
#include "conslide/harness.hpp"
#include "conslide/hit.hpp"
#include "conslide/logging.hpp"
#include "conslide/metrics.hpp"
#include "run_manifest.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace conslide;
using namespace conslide::cli;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumerical = 4;

int guarded(const std::function<void()>& body) {
  try {
    body();
    return kExitOk;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return kExitIo;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw FormatError(FormatErrorCode::kIo, "cannot write " + path.string());
}

void require_path(const fs::path& p, const char* flag) {
  if (p.empty()) throw ConfigError(std::string("missing ") + flag + " (flag or config key)");
}

void prepare_out(const fs::path& out) {
  require_path(out, "--out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw FormatError(FormatErrorCode::kIo, "cannot create " + out.string() + ": " + ec.message());
}

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

std::vector<TreeEntry> tree_entries(const fs::path& root, const std::string& prefix) {
  std::vector<TreeEntry> out;
  for (const auto& rel : list_tree(root)) out.push_back({prefix + rel.generic_string(), file_blob_hash(root / rel)});
  return out;
}

// ---- generate ----

struct GenerateFlags {
  std::string config, preset, out;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  CLI::Option *o_preset, *o_out, *o_seed, *o_workers;
};

void cmd_generate(const GenerateFlags& f) {
  GenerateSettings s;
  if (!f.config.empty()) s = generate_settings_from_json(read_json_file(f.config));
  if (f.o_preset->count()) s.preset = f.preset;
  if (f.o_out->count()) s.out = f.out;
  if (f.o_seed->count()) s.seed = f.seed;
  if (f.o_workers->count()) s.workers = f.workers;

  SyntheticSpec spec = synthetic_spec_from_json(s.synthetic, synthetic_preset(s.preset));
  if (s.seed) spec.seed = *s.seed;
  prepare_out(s.out);
  const Dataset ds = generate_synthetic(spec);
  write_dataset(ds, s.out);

  RunManifest m;
  m.command = "generate";
  m.config = {{"preset", s.preset}, {"synthetic", to_json(spec)}, {"workers", s.workers}};
  m.output_dir = s.out.string();
  m.seed = spec.seed;
  m.inputs = {{"config", blob_hash(m.config.dump())}};
  for (const auto& rel : list_tree(s.out)) m.outputs.push_back(rel.generic_string());
  m.output_tree_hash = directory_hash(s.out, {"run_manifest.json"});
  m.write(s.out / "run_manifest.json");
  std::printf("generated %zu train / %zu test bags, %zu tasks, in %s\ntree hash %s\n", ds.train.size(), ds.test.size(),
              ds.tasks.size(), s.out.string().c_str(), m.output_tree_hash.c_str());
}

// ---- train ----

struct TrainFlags {
  std::string config, preset, out, data;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  CLI::Option *o_preset, *o_out, *o_data, *o_seed, *o_workers;
};

void print_final_table(const RunResult& r) {
  std::printf("\n%-6s %-8s %-8s %-8s %-8s %-10s\n", "stage", "ACC", "Masked", "AUC", "buffer", "loss");
  for (const auto& st : r.stages)
    std::printf("%-6zu %-8.4f %-8.4f %-8s %-8zu %-10.4f\n", st.stage, st.acc, st.masked_acc, fmt_opt(st.auc).c_str(),
                st.buffer_regions, st.mean_loss.total);
  std::printf("\naccuracy matrix R[i][j] (row: after task i)\n");
  for (std::size_t i = 0; i < r.matrix.tasks(); ++i) {
    for (std::size_t j = 0; j < r.matrix.tasks(); ++j) std::printf(" %.4f", r.matrix(i, j));
    std::printf("\n");
  }
  const auto& m = r.metrics;
  std::printf("\n%-12s %s\n", "metric", "value");
  std::printf("%-12s %s\n", "AUC", fmt_opt(m.auc).c_str());
  std::printf("%-12s %.4f\n", "ACC", m.acc);
  std::printf("%-12s %.4f\n", "Masked ACC", m.masked_acc);
  std::printf("%-12s %s\n", "BWT", fmt_opt(m.bwt).c_str());
  std::printf("%-12s %s\n", "Forgetting", fmt_opt(m.forgetting).c_str());
  std::printf("(%.1f s)\n", r.seconds);
}

void cmd_train(const TrainFlags& f) {
  TrainSettings s;
  if (!f.config.empty()) s = train_settings_from_json(read_json_file(f.config));
  if (f.o_preset->count()) s.preset = f.preset;
  if (f.o_out->count()) s.out = f.out;
  if (f.o_data->count()) s.data = f.data;
  if (f.o_seed->count()) s.seed = f.seed;
  if (f.o_workers->count()) s.workers = f.workers;
  require_path(s.data, "--data");
  require_path(s.out, "--out");

  const TrainConfig cfg = resolve_train_config(s);
  const Dataset ds = load_dataset(s.data);
  if (ds.train.empty()) throw FormatError(FormatErrorCode::kIo, "dataset " + s.data.string() + " has no training bags");
  const TaskSequence seq = TaskSequence::from_dataset(ds);
  const HitConfig hit = resolve_hit_config(s, ds.train.front().channels(), seq.total_classes());
  prepare_out(s.out);

  RunOptions options;
  options.checkpoint_dir = s.out / "checkpoints";
  options.on_stage = [&](const StageReport& st) {
    std::fprintf(stderr, "stage %zu (%s): ACC %.4f, Masked %.4f, loss %.4f, %zu steps, %.1f s\n", st.stage,
                 seq.tasks[st.stage].name.c_str(), st.acc, st.masked_acc, st.mean_loss.total, st.steps, st.seconds);
  };
  const RunResult result = run_sequence(seq, hit, cfg, options);

  json report = run_report_json(result, hit, cfg);
  report["preset"] = s.preset;
  report["data"] = s.data.string();
  write_text(s.out / "report.json", report.dump(2) + "\n");
  write_text(s.out / "accuracy_matrix.csv", accuracy_matrix_csv(result.matrix));

  RunManifest m;
  m.command = "train";
  m.config = {{"preset", s.preset},
              {"data", s.data.string()},
              {"seed", cfg.seed},
              {"workers", cfg.workers},
              {"train", to_json(cfg)},
              {"model", to_json(hit)}};
  m.seed = cfg.seed;
  m.output_dir = s.out.string();
  m.inputs = tree_entries(s.data, "data/");
  m.inputs.push_back({"config", blob_hash(m.config.dump())});
  for (const auto& rel : list_tree(s.out))
    if (rel != "run_manifest.json") m.outputs.push_back(rel.generic_string());
  m.write(s.out / "run_manifest.json");
  print_final_table(result);
}

// ---- eval ----

struct EvalFlags {
  std::string config, checkpoint, manifest, scenario, out;
  bool rollout = false;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  CLI::Option *o_checkpoint, *o_manifest, *o_scenario, *o_out, *o_rollout, *o_seed, *o_workers;
};

std::size_t meta_count(const std::vector<CheckpointEntry>& entries, const char* name) {
  const auto* e = find_entry(entries, name);
  if (!e || e->value.numel() != 1)
    throw FormatError(FormatErrorCode::kInvalidContent, std::string("checkpoint lacks ") + name);
  return static_cast<std::size_t>(e->value[0]);
}

std::vector<TaskInfo> meta_tasks(const std::vector<CheckpointEntry>& entries) {
  const auto* e = find_entry(entries, "meta.task_ranges");
  if (!e || e->value.shape.size() != 2 || e->value.dim(1) != 3)
    throw FormatError(FormatErrorCode::kInvalidContent, "checkpoint lacks meta.task_ranges");
  std::vector<TaskInfo> tasks;
  for (std::size_t t = 0; t < e->value.dim(0); ++t) {
    TaskInfo info;
    info.task_id = static_cast<std::uint32_t>(e->value[t * 3]);
    info.name = "task_" + std::to_string(info.task_id);
    info.class_begin = static_cast<std::uint32_t>(e->value[t * 3 + 1]);
    info.class_end = static_cast<std::uint32_t>(e->value[t * 3 + 2]);
    tasks.push_back(info);
  }
  return tasks;
}

std::string rollout_csv(const HitModel& model, const std::vector<FeatureBag>& bags) {
  std::string csv = "sample_id,region,score\n";
  char buf[64];
  for (const auto& bag : bags) {
    Tape t;
    const auto scores = attention_rollout(hit_forward(t, model, bag, {.retain_attention = true}));
    for (std::size_t r = 0; r < scores.size(); ++r) {
      std::snprintf(buf, sizeof buf, "%.17g", scores[r]);
      csv += bag.sample_id + "," + std::to_string(r) + "," + buf + "\n";
    }
  }
  return csv;
}

void cmd_eval(const EvalFlags& f) {
  EvalSettings s;
  if (!f.config.empty()) s = eval_settings_from_json(read_json_file(f.config));
  if (f.o_checkpoint->count()) s.checkpoint = f.checkpoint;
  if (f.o_manifest->count()) s.manifest = f.manifest;
  if (f.o_scenario->count()) s.scenario = f.scenario;
  if (f.o_out->count()) s.out = f.out;
  if (f.o_seed->count()) s.seed = f.seed;
  if (f.o_workers->count()) s.workers = f.workers;
  const bool rollout = f.rollout || !s.rollout.empty();
  const Scenario scenario = parse_scenario(s.scenario);
  if (s.workers < 1) throw ConfigError("workers must be >= 1");
  require_path(s.checkpoint, "--checkpoint");
  require_path(s.manifest, "--manifest");
  require_path(s.out, "--out");

  const auto entries = read_checkpoint(s.checkpoint);
  const HitModel model = model_from_checkpoint(entries);
  const auto tasks = meta_tasks(entries);
  const std::size_t seen_end = meta_count(entries, "meta.seen_class_end");
  const auto manifest = read_manifest_jsonl(s.manifest);
  if (manifest.empty()) throw ConfigError("manifest " + s.manifest.string() + " is empty");
  const auto bags = load_bags(manifest, s.manifest.parent_path());
  prepare_out(s.out);

  const EvalResult r = evaluate(model, bags, tasks, seen_end, scenario, s.workers);
  json task_acc = json::object();
  for (const auto& [task, acc] : r.task_accuracy) task_acc[std::to_string(task)] = acc;
  json auc = nullptr;
  try {
    auc = auc_ovr(r.probabilities, r.labels).macro;
  } catch (const ConfigError&) {
    // No class has both positives and negatives among these samples.
  }
  json metrics{{"checkpoint", s.checkpoint.string()},
               {"manifest", s.manifest.string()},
               {"scenario", to_string(scenario)},
               {"stage", meta_count(entries, "meta.stage")},
               {"seen_class_end", seen_end},
               {"samples", bags.size()},
               {"acc", r.accuracy},
               {"masked_acc", r.masked_accuracy},
               {"auc", auc},
               {"task_accuracy", task_acc}};
  write_text(s.out / "eval_metrics.json", metrics.dump(2) + "\n");
  fs::path rollout_path = s.rollout.empty() ? s.out / "rollout.csv" : s.rollout;
  if (rollout) write_text(rollout_path, rollout_csv(model, bags));

  RunManifest m;
  m.command = "eval";
  m.config = {{"checkpoint", s.checkpoint.string()}, {"manifest", s.manifest.string()},
              {"scenario", to_string(scenario)},     {"workers", s.workers},
              {"rollout", rollout}};
  m.seed = s.seed.value_or(0);
  m.output_dir = s.out.string();
  m.inputs = {{"checkpoint", file_blob_hash(s.checkpoint)},
              {"manifest", file_blob_hash(s.manifest)},
              {"config", blob_hash(m.config.dump())}};
  for (const auto& e : manifest) m.inputs.push_back({"bags/" + e.sample_id, file_blob_hash(s.manifest.parent_path() / e.path)});
  m.outputs = {"eval_metrics.json"};
  if (rollout) m.outputs.push_back(rollout_path.string());
  m.write(s.out / "run_manifest.json");
  std::printf("%s\n", metrics.dump(2).c_str());
}

// ---- inspect-buffer ----

struct InspectFlags {
  std::string config, snapshot, out, preset;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  CLI::Option *o_snapshot, *o_out, *o_seed, *o_workers, *o_preset;
};

void cmd_inspect(const InspectFlags& f) {
  InspectSettings s;
  if (!f.config.empty()) s = inspect_settings_from_json(read_json_file(f.config));
  if (f.o_snapshot->count()) s.snapshot = f.snapshot;
  if (f.o_out->count()) s.out = f.out;
  if (f.o_seed->count()) s.seed = f.seed;
  if (f.o_workers->count()) s.workers = f.workers;
  if (f.o_preset->count()) s.preset = f.preset;
  require_path(s.snapshot, "snapshot");
  const auto snap = read_buffer_snapshot(s.snapshot);
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> counts;
  for (const auto& r : snap.records) ++counts[{r.task_id, r.label}];
  std::string csv = "task_id,label,count\n";
  for (const auto& [pair, n] : counts)
    csv += std::to_string(pair.first) + "," + std::to_string(pair.second) + "," + std::to_string(n) + "\n";
  std::printf("%s", csv.c_str());
  std::printf("total %zu records, capacity %llu\n", snap.records.size(), static_cast<unsigned long long>(snap.capacity));
  if (s.out.empty()) return;
  prepare_out(s.out);
  write_text(s.out / "buffer_counts.csv", csv);
  RunManifest m;
  m.command = "inspect-buffer";
  m.config = {{"snapshot", s.snapshot.string()}};
  m.seed = s.seed;
  m.output_dir = s.out.string();
  m.inputs = {{"snapshot", file_blob_hash(s.snapshot)}, {"config", blob_hash(m.config.dump())}};
  m.outputs = {"buffer_counts.csv"};
  m.write(s.out / "run_manifest.json");
}

}  // namespace

int main(int argc, char** argv) {
  logging::set_level(logging::Level::kWarn);
  CLI::App app{"Continual learning on whole-slide feature bags"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress to stderr");
  const std::vector<std::string> presets{"finetune", "conslide", "conslide-no-buro", "conslide-no-cssl"};

  GenerateFlags gf;
  auto* gen = app.add_subcommand("generate", "Write a synthetic feature-bag dataset");
  gen->add_option("--config", gf.config, "JSON config file");
  gf.o_preset = gen->add_option("--preset", gf.preset, "Dataset preset: default, tcga-mirror");
  gf.o_out = gen->add_option("--out", gf.out, "Output directory");
  gf.o_seed = gen->add_option("--seed", gf.seed, "Generator seed");
  gf.o_workers = gen->add_option("--workers", gf.workers, "Accepted for uniformity; generation is serial");

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Run a continual-learning sequence");
  train->add_option("--config", tf.config, "JSON config file");
  tf.o_data = train->add_option("--data", tf.data, "Dataset directory");
  tf.o_preset = train->add_option("--preset", tf.preset, "Method preset")->check(CLI::IsMember(presets));
  tf.o_out = train->add_option("--out", tf.out, "Output directory");
  tf.o_seed = train->add_option("--seed", tf.seed, "Run seed");
  tf.o_workers = train->add_option("--workers", tf.workers, "Evaluation threads");

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  eval->add_option("--config", ef.config, "JSON config file");
  ef.o_checkpoint = eval->add_option("--checkpoint", ef.checkpoint, "Stage checkpoint (.csck)");
  ef.o_manifest = eval->add_option("--manifest", ef.manifest, "Manifest (.jsonl) of bags to score");
  ef.o_scenario = eval->add_option("--scenario", ef.scenario, "class-incremental or task-incremental");
  ef.o_out = eval->add_option("--out", ef.out, "Output directory");
  ef.o_rollout = eval->add_flag("--rollout", ef.rollout, "Also write per-region rollout scores");
  ef.o_seed = eval->add_option("--seed", ef.seed, "Recorded in the run manifest");
  ef.o_workers = eval->add_option("--workers", ef.workers, "Evaluation threads");
  std::string eval_preset;
  eval->add_option("--preset", eval_preset, "Accepted for uniformity; the checkpoint fixes the model");

  InspectFlags inf;
  auto* inspect = app.add_subcommand("inspect-buffer", "Count buffer snapshot records per (task, label)");
  inspect->add_option("--config", inf.config, "JSON config file");
  inf.o_snapshot = inspect->add_option("snapshot,--snapshot", inf.snapshot, "Buffer snapshot (.csbf)");
  inf.o_out = inspect->add_option("--out", inf.out, "Optional output directory for the counts CSV");
  inf.o_seed = inspect->add_option("--seed", inf.seed, "Recorded in the run manifest");
  inf.o_workers = inspect->add_option("--workers", inf.workers, "Accepted for uniformity; counting is serial");
  inf.o_preset = inspect->add_option("--preset", inf.preset, "Accepted for uniformity; the snapshot fixes the content");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  if (verbose) logging::set_level(logging::Level::kInfo);

  if (*gen) return guarded([&] { cmd_generate(gf); });
  if (*train) return guarded([&] { cmd_train(tf); });
  if (*eval) return guarded([&] { cmd_eval(ef); });
  return guarded([&] { cmd_inspect(inf); });
}

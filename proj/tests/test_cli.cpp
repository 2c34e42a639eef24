#include <gtest/gtest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "conslide/buro.hpp"
#include "conslide/hit.hpp"

#ifndef CONSLIDE_CLI_PATH
#error "CONSLIDE_CLI_PATH must name the CLI binary"
#endif

namespace conslide {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const fs::path& root() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "conslide_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = "cd '" + root().string() + "' && '" CONSLIDE_CLI_PATH "' " + args + " >>cli.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(root() / p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

void write(const fs::path& p, const std::string& text) { std::ofstream(root() / p) << text; }

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    write("gen.json", R"({"synthetic": {"channels": 8, "tasks": 2, "train_per_class": 4, "test_per_class": 3,
                          "min_regions": 2, "max_regions": 4, "patches": 3}})");
    write("train.json", R"({"data": "data", "seed": 1,
                            "train": {"epochs_per_task": 2, "learning_rate": 1e-3, "buffer_capacity": 24},
                            "model": {"heads": 2}})");
    ASSERT_EQ(run("generate --config gen.json --seed 3 --out data"), 0);
    ASSERT_EQ(run("train --config train.json --preset conslide --out run_a"), 0);
  }
};

TEST_F(CliTest, GenerateWritesDatasetAndIsDeterministic) {
  EXPECT_TRUE(fs::exists(root() / "data/train.jsonl"));
  EXPECT_TRUE(fs::exists(root() / "data/dataset.json"));
  ASSERT_EQ(run("generate --config gen.json --seed 3 --out data_again"), 0);
  ASSERT_EQ(run("generate --config gen.json --seed 4 --out data_other"), 0);
  const auto a = read_json("data/run_manifest.json"), b = read_json("data_again/run_manifest.json");
  EXPECT_EQ(a.at("output_tree_hash"), b.at("output_tree_hash"));
  EXPECT_NE(a.at("output_tree_hash"), read_json("data_other/run_manifest.json").at("output_tree_hash"));
  EXPECT_EQ(a.at("seed"), 3);
  EXPECT_EQ(a.at("config").at("synthetic").at("channels"), 8);
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
  write("bad_key.json", R"({"synthetic": {"chanels": 8}})");
  write("bad_syntax.json", "{oops");
  EXPECT_EQ(run("generate --config bad_key.json --out x"), 2);
  EXPECT_EQ(run("generate --config bad_syntax.json --out x"), 2);
  EXPECT_EQ(run("generate --preset nope --out x"), 2);
  EXPECT_EQ(run("train --data data --out x --preset nope"), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("eval --checkpoint run_a/checkpoints/stage_1.csck --manifest data/test.jsonl --out ev --scenario domain"), 2);
}

TEST_F(CliTest, MissingInputsExitThree) {
  EXPECT_EQ(run("train --data no_such_dir --out x"), 3);
  EXPECT_EQ(run("train --config no_such.json --out x"), 3);
  EXPECT_EQ(run("eval --checkpoint nope.csck --manifest data/test.jsonl --out ev"), 3);
  EXPECT_EQ(run("inspect-buffer nope.csbf"), 3);
}

TEST_F(CliTest, DivergingTrainingExitsFourWithStage) {
  write("diverge.json", R"({"data": "data", "preset": "finetune",
                            "train": {"epochs_per_task": 1, "learning_rate": 1e300}, "model": {"heads": 2}})");
  fs::remove(root() / "cli.log");
  EXPECT_EQ(run("train --config diverge.json --out run_nan"), 4);
  EXPECT_NE(slurp("cli.log").find("stage 0"), std::string::npos) << slurp("cli.log");
}

TEST_F(CliTest, TrainWritesReportsAndFlagsOverrideFile) {
  for (const char* f : {"report.json", "accuracy_matrix.csv", "run_manifest.json", "checkpoints/stage_0.csck",
                        "checkpoints/stage_1.csck", "checkpoints/buffer_stage_1.csbf"})
    EXPECT_TRUE(fs::exists(root() / "run_a" / f)) << f;
  const auto report = read_json("run_a/report.json");
  EXPECT_EQ(report.at("config").at("train").at("epochs_per_task"), 2);
  EXPECT_EQ(report.at("preset"), "conslide");
  const auto manifest = read_json("run_a/run_manifest.json");
  EXPECT_EQ(manifest.at("seed"), 1);
  EXPECT_EQ(manifest.at("input_hash").get<std::string>().size(), 64u);

  ASSERT_EQ(run("train --config train.json --seed 9 --out run_seed9"), 0);
  EXPECT_EQ(read_json("run_seed9/run_manifest.json").at("seed"), 9);
  EXPECT_EQ(read_json("run_seed9/report.json").at("config").at("train").at("seed"), 9);
}

TEST_F(CliTest, IdenticalSeedsGiveIdenticalCsv) {
  ASSERT_EQ(run("train --config train.json --preset conslide --out run_b"), 0);
  EXPECT_EQ(slurp("run_a/accuracy_matrix.csv"), slurp("run_b/accuracy_matrix.csv"));
  EXPECT_EQ(read_json("run_a/run_manifest.json").at("input_hash"), read_json("run_b/run_manifest.json").at("input_hash"));
}

TEST_F(CliTest, PresetsRun) {
  ASSERT_EQ(run("train --config train.json --preset finetune --out run_ft"), 0);
  const auto cfg = read_json("run_ft/report.json").at("config").at("train");
  EXPECT_EQ(cfg.at("alpha"), 0.0);
  EXPECT_EQ(cfg.at("beta"), 0.0);
  EXPECT_EQ(cfg.at("buffer_capacity"), 0);
  EXPECT_TRUE(read_buffer_snapshot(root() / "run_ft/checkpoints/buffer_stage_1.csbf").records.empty());
  ASSERT_EQ(run("train --config train.json --preset conslide-no-buro --out run_nb"), 0);
  EXPECT_EQ(read_json("run_nb/report.json").at("config").at("train").at("replay_mode"), "whole-slide");
}

TEST_F(CliTest, EvalReproducesAccuracyMatrixEntries) {
  const auto matrix = read_json("run_a/report.json").at("metrics").at("accuracy_matrix");
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string out = "eval_" + std::to_string(i);
    ASSERT_EQ(run("eval --checkpoint run_a/checkpoints/stage_" + std::to_string(i) +
                  ".csck --manifest data/test.jsonl --out " + out),
              0);
    const auto m = read_json(out + "/eval_metrics.json");
    EXPECT_EQ(m.at("stage"), i);
    for (std::size_t j = 0; j < 2; ++j)
      EXPECT_EQ(m.at("task_accuracy").at(std::to_string(j)).get<double>(), matrix.at(i).at(j).get<double>())
          << i << "," << j;
  }
}

TEST_F(CliTest, RolloutCsvMatchesLibrary) {
  ASSERT_EQ(run("eval --checkpoint run_a/checkpoints/stage_1.csck --manifest data/test.jsonl --out eval_roll --rollout"), 0);
  std::istringstream csv(slurp("eval_roll/rollout.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "sample_id,region,score");
  std::map<std::string, std::vector<double>> scores;
  while (std::getline(csv, line)) {
    const auto a = line.find(','), b = line.rfind(',');
    scores[line.substr(0, a)].push_back(std::strtod(line.c_str() + b + 1, nullptr));
  }
  const HitModel model = model_from_checkpoint(read_checkpoint(root() / "run_a/checkpoints/stage_1.csck"));
  const auto manifest = read_manifest_jsonl(root() / "data/test.jsonl");
  ASSERT_EQ(scores.size(), manifest.size());
  for (const auto& bag : load_bags(manifest, root() / "data")) {
    Tape t;
    const auto expect = attention_rollout(hit_forward(t, model, bag, {.retain_attention = true}));
    EXPECT_EQ(scores.at(bag.sample_id), expect) << bag.sample_id;
  }
}

// Independent recount straight from the snapshot bytes.
std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> recount(const std::string& bytes) {
  auto u32 = [&](std::size_t at) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + at, 4);
    return v;
  };
  std::uint64_t count;
  std::memcpy(&count, bytes.data() + 4 + 2 + 8, 8);
  std::size_t at = 4 + 2 + 8 + 8;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> out;
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto task = u32(at), label = u32(at + 4), n = u32(at + 8), c = u32(at + 12);
    ++out[{task, label}];
    at += 16 + 8 * static_cast<std::size_t>(c) * (1 + n);
  }
  EXPECT_EQ(at, bytes.size());
  return out;
}

TEST_F(CliTest, InspectBufferCountsMatchRecount) {
  ASSERT_EQ(run("inspect-buffer run_a/checkpoints/buffer_stage_1.csbf --out inspect"), 0);
  std::istringstream csv(slurp("inspect/buffer_counts.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "task_id,label,count");
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> table;
  std::size_t total = 0;
  while (std::getline(csv, line)) {
    unsigned t, l;
    std::size_t n;
    ASSERT_EQ(std::sscanf(line.c_str(), "%u,%u,%zu", &t, &l, &n), 3);
    table[{t, l}] = n;
    total += n;
  }
  EXPECT_EQ(table, recount(slurp("run_a/checkpoints/buffer_stage_1.csbf")));
  EXPECT_EQ(total, read_buffer_snapshot(root() / "run_a/checkpoints/buffer_stage_1.csbf").records.size());
  EXPECT_TRUE(fs::exists(root() / "inspect/run_manifest.json"));
}

TEST_F(CliTest, InspectEmptySnapshot) {
  write_buffer_snapshot(RehearsalBuffer(10, 1), root() / "empty.csbf");
  ASSERT_EQ(run("inspect-buffer --snapshot empty.csbf --out inspect_empty"), 0);
  EXPECT_EQ(slurp("inspect_empty/buffer_counts.csv"), "task_id,label,count\n");
}

}  // namespace
}  // namespace conslide

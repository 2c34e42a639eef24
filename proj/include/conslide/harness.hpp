#pragma once

// Continual training over a task sequence.
//
// Per current sample: draw one replay bag, evaluate
//   CE(current) + alpha * CE(replay) + beta * (CSSL(current) + CSSL(replay)),
// route gradients so PT parameters receive lambda_pt * g_CE + g_CSSL while
// every other group receives g_CE (CSSL gradients reach only PT and the
// projector), take an Adam step, then break the sample up into the buffer.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "conslide/buro.hpp"
#include "conslide/cssl.hpp"
#include "conslide/data.hpp"
#include "conslide/hit.hpp"
#include "conslide/metrics.hpp"

namespace conslide {

enum class Scenario { kClassIncremental, kTaskIncremental };
enum class ReplayMode { kBreakupReorganize, kWholeSlide };

const char* to_string(Scenario s);
Scenario parse_scenario(const std::string& s);
const char* to_string(ReplayMode m);
ReplayMode parse_replay_mode(const std::string& s);

struct TrainConfig {
  double alpha = 0.5;
  double beta = 0.1;
  double lambda_pt = 0.1;
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs_per_task = 20;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  Scenario scenario = Scenario::kClassIncremental;
  std::size_t buffer_capacity = 1100;  // regions
  std::size_t breakup_size = 32;
  std::size_t replay_size = 16;
  ReplayMode replay_mode = ReplayMode::kBreakupReorganize;
  /// Whole-slide replay converts the region budget to slides with this; 0
  /// uses the mean region count of the training data.
  double regions_per_slide = 0.0;
  std::size_t projection_dim = 0;  // 0 selects C
  std::size_t workers = 1;

  void validate() const;
};

/// Presets: finetune, conslide, conslide-no-buro, conslide-no-cssl.
TrainConfig apply_preset(const std::string& name, TrainConfig base);

nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const HitConfig& cfg);
/// Overlays keys present in `j` onto `base`; unknown keys are a ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
HitConfig hit_config_from_json(const nlohmann::json& j, HitConfig base = {});

struct TaskSequence {
  std::vector<TaskInfo> tasks;
  std::vector<std::vector<FeatureBag>> train;  // per task
  std::vector<std::vector<FeatureBag>> test;

  /// Class ranges disjoint, contiguous from 0, labels within their task.
  void validate() const;
  std::size_t total_classes() const { return tasks.empty() ? 0 : tasks.back().class_end; }
  static TaskSequence from_dataset(const Dataset& ds);
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps);
  /// Applies one update from each parameter's accumulated grad.
  void step();
  std::uint64_t steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

/// Source of replay bags.
class ReplayMemory {
 public:
  virtual ~ReplayMemory() = default;
  /// Called after the optimizer step for each current sample.
  virtual void observe(const FeatureBag& bag, Rng& rng) = 0;
  virtual std::optional<FeatureBag> draw(Rng& rng) const = 0;
  virtual std::size_t stored_regions() const = 0;
  /// (task_id, label) pairs present.
  virtual std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> pair_counts() const = 0;
};

class BuroMemory final : public ReplayMemory {
 public:
  BuroMemory(std::size_t capacity_regions, std::size_t breakup_size, std::size_t replay_size, std::uint64_t seed);
  void observe(const FeatureBag& bag, Rng& rng) override;
  std::optional<FeatureBag> draw(Rng& rng) const override;
  std::size_t stored_regions() const override { return buffer_.size(); }
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> pair_counts() const override {
    return buffer_.pair_counts();
  }
  const RehearsalBuffer& buffer() const { return buffer_; }

 private:
  RehearsalBuffer buffer_;
  std::size_t breakup_size_, replay_size_;
};

/// Reservoir of whole bags, replayed unchanged (no reorganize).
class WholeSlideMemory final : public ReplayMemory {
 public:
  WholeSlideMemory(std::size_t capacity_slides, std::uint64_t seed);
  void observe(const FeatureBag& bag, Rng& rng) override;
  std::optional<FeatureBag> draw(Rng& rng) const override;
  std::size_t stored_regions() const override;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> pair_counts() const override;
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return slots_.size(); }

 private:
  std::size_t capacity_;
  std::vector<FeatureBag> slots_;
  std::uint64_t seen_ = 0;
  Rng rng_;
};

std::unique_ptr<ReplayMemory> make_replay_memory(const TrainConfig& cfg, double mean_regions_per_slide);

struct LossBreakdown {
  double ce_current = 0.0;
  double ce_replay = 0.0;
  double cssl_current = 0.0;
  double cssl_replay = 0.0;
  double total = 0.0;
  bool replayed = false;

  LossBreakdown& operator+=(const LossBreakdown& o);
};

class ContinualTrainer {
 public:
  ContinualTrainer(HitModel& model, CsslProjector& projector, ReplayMemory& memory, const TrainConfig& cfg,
                   std::uint64_t replay_seed);

  /// Gradients of one current sample (and an optional replay bag) added into
  /// Parameter::grad with weight `weight`, using the routing rule above.
  LossBreakdown accumulate_gradients(const FeatureBag& current, const FeatureBag* replay,
                                     const std::vector<std::size_t>& allowed_classes, double weight = 1.0);

  /// Zero grads, accumulate over the batch (mean), Adam step, then insert the
  /// batch into replay memory. Returns the batch-mean losses.
  LossBreakdown train_step(std::span<const FeatureBag* const> batch, const std::vector<std::size_t>& allowed_classes);
  LossBreakdown train_step(const FeatureBag& bag, const std::vector<std::size_t>& allowed_classes);

  std::vector<Parameter*> all_parameters();
  void zero_grad();
  const Adam& optimizer() const { return adam_; }

 private:
  HitModel& model_;
  CsslProjector& projector_;
  ReplayMemory& memory_;
  TrainConfig cfg_;
  Adam adam_;
  Rng replay_rng_;
};

struct EvalResult {
  ScoreMatrix probabilities;  // softmax over seen classes, 0 elsewhere
  std::vector<std::size_t> labels;
  std::vector<std::uint32_t> task_ids;
  std::vector<std::string> sample_ids;
  std::vector<std::size_t> predictions;         // argmax over seen classes
  std::vector<std::size_t> masked_predictions;  // argmax within the sample's task
  double accuracy = 0.0;
  double masked_accuracy = 0.0;
  /// Accuracy under the chosen scenario per task id present.
  std::map<std::uint32_t, double> task_accuracy;
};

/// Classification over precomputed logits [samples x classes].
EvalResult evaluate_logits(const ScoreMatrix& logits, std::vector<std::size_t> labels,
                           std::vector<std::uint32_t> task_ids, std::span<const TaskInfo> class_map,
                           std::size_t seen_class_end, Scenario scenario);

EvalResult evaluate(const HitModel& model, std::span<const FeatureBag> bags, std::span<const TaskInfo> class_map,
                    std::size_t seen_class_end, Scenario scenario, std::size_t workers = 1);

struct MetricReport {
  std::optional<double> auc;
  double acc = 0.0;
  double masked_acc = 0.0;
  std::optional<double> bwt;
  std::optional<double> forgetting;
  std::vector<std::optional<double>> per_class_auc;
  std::optional<double> avg_auc;
  double avg_acc = 0.0;
  double avg_masked_acc = 0.0;
};

struct StageReport {
  std::size_t stage = 0;
  std::vector<double> accuracy_row;
  std::optional<double> auc;  // over tasks seen so far
  double acc = 0.0;
  double masked_acc = 0.0;
  LossBreakdown mean_loss;
  std::size_t steps = 0;
  std::size_t buffer_regions = 0;
  double seconds = 0.0;
};

struct RunResult {
  AccuracyMatrix matrix{1};
  MetricReport metrics;
  std::vector<StageReport> stages;
  double seconds = 0.0;
};

/// Independent stream seeds for model init, projector init, buffer reservoir,
/// replay draws and epoch shuffling.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct RunOptions {
  /// Per-stage checkpoints (and buffer snapshots) go here when non-empty.
  std::filesystem::path checkpoint_dir;
  std::function<void(const StageReport&)> on_stage;
};

RunResult run_sequence(const TaskSequence& seq, const HitConfig& hit, const TrainConfig& cfg,
                       const RunOptions& options = {});

/// Accuracy matrix as CSV with a header row; values printed with 17 digits.
std::string accuracy_matrix_csv(const AccuracyMatrix& m);
nlohmann::json metrics_json(const MetricReport& m, const AccuracyMatrix& matrix);
nlohmann::json run_report_json(const RunResult& r, const HitConfig& hit, const TrainConfig& cfg);

}  // namespace conslide

#include "conslide/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <set>
#include <sstream>

#include "conslide/errors.hpp"
#include "conslide/logging.hpp"
#include "conslide/ops.hpp"

namespace conslide {

const char* to_string(Scenario s) {
  return s == Scenario::kClassIncremental ? "class-incremental" : "task-incremental";
}

Scenario parse_scenario(const std::string& s) {
  if (s == "class-incremental" || s == "class") return Scenario::kClassIncremental;
  if (s == "task-incremental" || s == "task" || s == "masked") return Scenario::kTaskIncremental;
  throw ConfigError("unknown scenario '" + s + "' (expected class-incremental or task-incremental)");
}

const char* to_string(ReplayMode m) { return m == ReplayMode::kBreakupReorganize ? "buro" : "whole-slide"; }

ReplayMode parse_replay_mode(const std::string& s) {
  if (s == "buro") return ReplayMode::kBreakupReorganize;
  if (s == "whole-slide") return ReplayMode::kWholeSlide;
  throw ConfigError("unknown replay mode '" + s + "' (expected buro or whole-slide)");
}

void TrainConfig::validate() const {
  auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  if (!finite_nonneg(alpha)) throw ConfigError("alpha must be finite and >= 0");
  if (!finite_nonneg(beta)) throw ConfigError("beta must be finite and >= 0");
  if (!(lambda_pt >= 0.0 && lambda_pt <= 1.0)) throw ConfigError("lambda_pt must lie in [0, 1]");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (epochs_per_task < 1) throw ConfigError("epochs_per_task must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (breakup_size < 1) throw ConfigError("breakup_size must be >= 1");
  if (replay_size < 1) throw ConfigError("replay_size must be >= 1");
  if (!finite_nonneg(regions_per_slide)) throw ConfigError("regions_per_slide must be >= 0");
  if (workers < 1) throw ConfigError("workers must be >= 1");
}

TrainConfig apply_preset(const std::string& name, TrainConfig base) {
  if (name == "finetune") {
    base.alpha = 0.0;
    base.beta = 0.0;
    base.lambda_pt = 1.0;
    base.buffer_capacity = 0;
  } else if (name == "conslide") {
    base.replay_mode = ReplayMode::kBreakupReorganize;
  } else if (name == "conslide-no-buro") {
    base.replay_mode = ReplayMode::kWholeSlide;
  } else if (name == "conslide-no-cssl") {
    base.beta = 0.0;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected finetune, conslide, conslide-no-buro, conslide-no-cssl)");
  }
  return base;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},
          {"beta", c.beta},
          {"lambda_pt", c.lambda_pt},
          {"learning_rate", c.learning_rate},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"epochs_per_task", c.epochs_per_task},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"scenario", to_string(c.scenario)},
          {"buffer_capacity", c.buffer_capacity},
          {"breakup_size", c.breakup_size},
          {"replay_size", c.replay_size},
          {"replay_mode", to_string(c.replay_mode)},
          {"regions_per_slide", c.regions_per_slide},
          {"projection_dim", c.projection_dim},
          {"workers", c.workers}};
}

nlohmann::json to_json(const HitConfig& c) {
  return {{"layers", c.layers},         {"channels", c.channels},
          {"heads", c.heads},           {"mlp_hidden", c.mlp_hidden},
          {"conv_kernel", c.conv_kernel}, {"num_classes_total", c.num_classes_total},
          {"eps", c.eps}};
}

namespace {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError(std::string("unknown ") + what + " config key '" + k + "'");
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  const nlohmann::json defaults = to_json(c);
  std::set<std::string> known;
  for (const auto& [k, v] : defaults.items()) known.insert(k);
  reject_unknown(j, known, "train");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) read_key(j, key, field);
  };
  get("alpha", c.alpha);
  get("beta", c.beta);
  get("lambda_pt", c.lambda_pt);
  get("learning_rate", c.learning_rate);
  get("adam_beta1", c.adam_beta1);
  get("adam_beta2", c.adam_beta2);
  get("adam_eps", c.adam_eps);
  get("epochs_per_task", c.epochs_per_task);
  get("batch_size", c.batch_size);
  get("seed", c.seed);
  get("buffer_capacity", c.buffer_capacity);
  get("breakup_size", c.breakup_size);
  get("replay_size", c.replay_size);
  get("regions_per_slide", c.regions_per_slide);
  get("projection_dim", c.projection_dim);
  get("workers", c.workers);
  if (j.contains("scenario")) {
    std::string s;
    read_key(j, "scenario", s);
    c.scenario = parse_scenario(s);
  }
  if (j.contains("replay_mode")) {
    std::string s;
    read_key(j, "replay_mode", s);
    c.replay_mode = parse_replay_mode(s);
  }
  c.validate();
  return c;
}

HitConfig hit_config_from_json(const nlohmann::json& j, HitConfig c) {
  reject_unknown(j, {"layers", "channels", "heads", "mlp_hidden", "conv_kernel", "num_classes_total", "eps"}, "model");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) read_key(j, key, field);
  };
  get("layers", c.layers);
  get("channels", c.channels);
  get("heads", c.heads);
  get("mlp_hidden", c.mlp_hidden);
  get("conv_kernel", c.conv_kernel);
  get("num_classes_total", c.num_classes_total);
  get("eps", c.eps);
  c.validate();
  return c;
}

void TaskSequence::validate() const {
  if (tasks.empty()) throw ConfigError("task sequence is empty");
  if (train.size() != tasks.size() || test.size() != tasks.size())
    throw ConfigError("task sequence: train/test lists must match the task count");
  std::uint32_t next = 0;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& info = tasks[t];
    if (info.class_begin != next || info.class_end <= info.class_begin)
      throw ConfigError("task sequence: class ranges must be disjoint, non-empty and contiguous from 0 (task " +
                        std::to_string(info.task_id) + ")");
    next = info.class_end;
    if (train[t].empty()) throw ConfigError("task sequence: task " + std::to_string(info.task_id) + " has no training bags");
    for (const auto* split : {&train[t], &test[t]})
      for (const auto& bag : *split) {
        if (bag.task_id != info.task_id || bag.label < info.class_begin || bag.label >= info.class_end)
          throw ConfigError("task sequence: bag " + bag.sample_id + " (task " + std::to_string(bag.task_id) +
                            ", label " + std::to_string(bag.label) + ") does not belong to task " +
                            std::to_string(info.task_id));
      }
  }
}

TaskSequence TaskSequence::from_dataset(const Dataset& ds) {
  TaskSequence seq;
  seq.tasks = ds.tasks;
  seq.train.resize(ds.tasks.size());
  seq.test.resize(ds.tasks.size());
  auto slot = [&](const FeatureBag& bag) -> std::size_t {
    for (std::size_t t = 0; t < ds.tasks.size(); ++t)
      if (ds.tasks[t].task_id == bag.task_id) return t;
    throw ConfigError("bag " + bag.sample_id + " has unknown task id " + std::to_string(bag.task_id));
  };
  for (const auto& b : ds.train) seq.train[slot(b)].push_back(b);
  for (const auto& b : ds.test) seq.test[slot(b)].push_back(b);
  seq.validate();
  return seq;
}

Adam::Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.numel(), 0.0);
    v_.emplace_back(p->value.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    require_finite(p.grad, p.name.c_str());
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = p.grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      p.value.data[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

BuroMemory::BuroMemory(std::size_t capacity_regions, std::size_t breakup_size, std::size_t replay_size,
                       std::uint64_t seed)
    : buffer_(capacity_regions, seed), breakup_size_(breakup_size), replay_size_(replay_size) {}

void BuroMemory::observe(const FeatureBag& bag, Rng& rng) {
  if (buffer_.capacity() == 0) return;
  buffer_.insert(breakup(bag, breakup_size_, rng));
}

std::optional<FeatureBag> BuroMemory::draw(Rng& rng) const {
  auto sel = buffer_.select(replay_size_, rng);
  if (!sel) return std::nullopt;
  return reorganize(sel->records);
}

WholeSlideMemory::WholeSlideMemory(std::size_t capacity_slides, std::uint64_t seed)
    : capacity_(capacity_slides), rng_(seed) {}

void WholeSlideMemory::observe(const FeatureBag& bag, Rng&) {
  ++seen_;
  if (slots_.size() < capacity_) {
    slots_.push_back(bag);
    return;
  }
  if (capacity_ == 0) return;
  std::uniform_int_distribution<std::uint64_t> pick(0, seen_ - 1);
  const auto j = pick(rng_);
  if (j < capacity_) slots_[j] = bag;
}

std::optional<FeatureBag> WholeSlideMemory::draw(Rng& rng) const {
  if (slots_.empty()) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(0, slots_.size() - 1);
  return slots_[pick(rng)];
}

std::size_t WholeSlideMemory::stored_regions() const {
  std::size_t n = 0;
  for (const auto& b : slots_) n += b.regions();
  return n;
}

std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> WholeSlideMemory::pair_counts() const {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> counts;
  for (const auto& b : slots_) ++counts[{b.task_id, b.label}];
  return counts;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over (seed, stream).
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::unique_ptr<ReplayMemory> make_replay_memory(const TrainConfig& cfg, double mean_regions_per_slide) {
  const std::uint64_t seed = derive_seed(cfg.seed, 3);
  if (cfg.replay_mode == ReplayMode::kBreakupReorganize)
    return std::make_unique<BuroMemory>(cfg.buffer_capacity, cfg.breakup_size, cfg.replay_size, seed);
  const double rps = cfg.regions_per_slide > 0.0 ? cfg.regions_per_slide : mean_regions_per_slide;
  std::size_t slides = 0;
  if (cfg.buffer_capacity > 0) {
    if (!(rps > 0.0)) throw ConfigError("whole-slide replay needs regions_per_slide > 0");
    slides = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(cfg.buffer_capacity) / rps)));
  }
  return std::make_unique<WholeSlideMemory>(slides, seed);
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  ce_current += o.ce_current;
  ce_replay += o.ce_replay;
  cssl_current += o.cssl_current;
  cssl_replay += o.cssl_replay;
  total += o.total;
  replayed = replayed || o.replayed;
  return *this;
}

namespace {

std::vector<Parameter*> collect(HitModel& model, CsslProjector& projector) {
  auto out = model.parameters().pointers();
  for (auto* p : projector.parameters().pointers()) out.push_back(p);
  return out;
}

constexpr GroupMask kNonPatchGroups{ParamGroup::kInteraction, ParamGroup::kRegion, ParamGroup::kHead,
                                    ParamGroup::kProjector};
constexpr GroupMask kSimilarityGroups{ParamGroup::kPatch, ParamGroup::kProjector};

}  // namespace

ContinualTrainer::ContinualTrainer(HitModel& model, CsslProjector& projector, ReplayMemory& memory,
                                   const TrainConfig& cfg, std::uint64_t replay_seed)
    : model_(model),
      projector_(projector),
      memory_(memory),
      cfg_(cfg),
      adam_(collect(model, projector), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
      replay_rng_(replay_seed) {
  cfg_.validate();
  if (projector.in_channels() != model.config().channels)
    throw ConfigError("projector input channels differ from model channels");
}

std::vector<Parameter*> ContinualTrainer::all_parameters() { return collect(model_, projector_); }

void ContinualTrainer::zero_grad() {
  model_.parameters().zero_grad();
  projector_.parameters().zero_grad();
}

LossBreakdown ContinualTrainer::accumulate_gradients(const FeatureBag& current, const FeatureBag* replay,
                                                     const std::vector<std::size_t>& allowed_classes, double weight) {
  Tape tape;
  LossBreakdown lb;
  const bool use_cssl = cfg_.beta > 0.0;

  auto out = hit_forward(tape, model_, current);
  Var classification = ops::cross_entropy(out.logits, current.label, allowed_classes);
  lb.ce_current = classification.item();
  Var similarity;
  if (use_cssl) {
    similarity = cssl_loss(tape, projector_, out.final_regions, out.patch_outputs.back()).loss;
    lb.cssl_current = similarity.item();
  }
  if (replay) {
    lb.replayed = true;
    auto rout = hit_forward(tape, model_, *replay);
    Var ce_r = ops::cross_entropy(rout.logits, replay->label, allowed_classes);
    lb.ce_replay = ce_r.item();
    if (cfg_.alpha > 0.0) classification = ops::add(classification, ops::scale(ce_r, cfg_.alpha));
    if (use_cssl) {
      Var cs_r = cssl_loss(tape, projector_, rout.final_regions, rout.patch_outputs.back()).loss;
      lb.cssl_replay = cs_r.item();
      similarity = ops::add(similarity, cs_r);
    }
  }
  lb.total = lb.ce_current + cfg_.alpha * lb.ce_replay + cfg_.beta * (lb.cssl_current + lb.cssl_replay);
  if (!std::isfinite(lb.total)) throw NumericalError("non-finite training loss on bag " + current.sample_id);

  auto params = all_parameters();
  tape.backward(classification);
  tape.accumulate_param_grads(params, kNonPatchGroups, weight);
  tape.accumulate_param_grads(params, GroupMask{ParamGroup::kPatch}, weight * cfg_.lambda_pt);
  if (use_cssl) {
    tape.backward(ops::scale(similarity, cfg_.beta));
    tape.accumulate_param_grads(params, kSimilarityGroups, weight);
  }
  return lb;
}

LossBreakdown ContinualTrainer::train_step(std::span<const FeatureBag* const> batch,
                                           const std::vector<std::size_t>& allowed_classes) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  zero_grad();
  LossBreakdown mean;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto* bag : batch) {
    auto replay = memory_.draw(replay_rng_);
    mean += accumulate_gradients(*bag, replay ? &*replay : nullptr, allowed_classes, w);
  }
  adam_.step();
  for (const auto* bag : batch) memory_.observe(*bag, replay_rng_);
  mean.ce_current *= w;
  mean.ce_replay *= w;
  mean.cssl_current *= w;
  mean.cssl_replay *= w;
  mean.total *= w;
  return mean;
}

LossBreakdown ContinualTrainer::train_step(const FeatureBag& bag, const std::vector<std::size_t>& allowed_classes) {
  const FeatureBag* one[] = {&bag};
  return train_step(std::span<const FeatureBag* const>(one), allowed_classes);
}

namespace {

const TaskInfo& task_for(std::span<const TaskInfo> class_map, std::uint32_t task_id) {
  for (const auto& t : class_map)
    if (t.task_id == task_id) return t;
  throw ConfigError("unknown task id " + std::to_string(task_id));
}

}  // namespace

EvalResult evaluate_logits(const ScoreMatrix& logits, std::vector<std::size_t> labels,
                           std::vector<std::uint32_t> task_ids, std::span<const TaskInfo> class_map,
                           std::size_t seen_class_end, Scenario scenario) {
  const std::size_t n = logits.samples;
  if (labels.size() != n || task_ids.size() != n) throw ConfigError("evaluate: label/task counts differ from samples");
  if (n == 0) throw ConfigError("evaluate: no samples");
  if (seen_class_end < 1 || seen_class_end > logits.classes)
    throw ConfigError("evaluate: seen class count " + std::to_string(seen_class_end) + " outside [1, " +
                      std::to_string(logits.classes) + "]");
  EvalResult res;
  res.probabilities = {n, logits.classes, std::vector<double>(n * logits.classes, 0.0)};
  std::vector<std::size_t> seen(seen_class_end);
  std::iota(seen.begin(), seen.end(), 0);
  std::map<std::uint32_t, std::pair<std::size_t, std::size_t>> per_task;  // correct, total
  std::size_t correct = 0, masked_correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& task = task_for(class_map, task_ids[i]);
    if (labels[i] < task.class_begin || labels[i] >= task.class_end)
      throw ConfigError("evaluate: label " + std::to_string(labels[i]) + " outside task " +
                        std::to_string(task.task_id) + " classes");
    double mx = logits(i, 0);
    for (std::size_t c = 1; c < seen_class_end; ++c) mx = std::max(mx, logits(i, c));
    double z = 0.0;
    for (std::size_t c = 0; c < seen_class_end; ++c) z += std::exp(logits(i, c) - mx);
    for (std::size_t c = 0; c < seen_class_end; ++c)
      res.probabilities.values[i * logits.classes + c] = std::exp(logits(i, c) - mx) / z;

    const std::size_t pred = argmax_over(logits, i, seen);
    std::vector<std::size_t> own(task.class_end - task.class_begin);
    std::iota(own.begin(), own.end(), static_cast<std::size_t>(task.class_begin));
    const std::size_t masked = argmax_over(logits, i, own);
    res.predictions.push_back(pred);
    res.masked_predictions.push_back(masked);
    correct += pred == labels[i];
    masked_correct += masked == labels[i];
    auto& [c, t] = per_task[task_ids[i]];
    c += (scenario == Scenario::kClassIncremental ? pred : masked) == labels[i];
    ++t;
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  res.masked_accuracy = static_cast<double>(masked_correct) / static_cast<double>(n);
  for (const auto& [task, ct] : per_task)
    res.task_accuracy[task] = static_cast<double>(ct.first) / static_cast<double>(ct.second);
  res.labels = std::move(labels);
  res.task_ids = std::move(task_ids);
  return res;
}

EvalResult evaluate(const HitModel& model, std::span<const FeatureBag> bags, std::span<const TaskInfo> class_map,
                    std::size_t seen_class_end, Scenario scenario, std::size_t workers) {
  const std::size_t k = model.config().num_classes_total;
  ScoreMatrix logits{bags.size(), k, std::vector<double>(bags.size() * k)};
  std::exception_ptr failure;
  const long n = static_cast<long>(bags.size());
#pragma omp parallel for schedule(dynamic) num_threads(static_cast<int>(std::max<std::size_t>(workers, 1)))
  for (long i = 0; i < n; ++i) {
    try {
      Tape tape;
      auto out = hit_forward(tape, model, bags[static_cast<std::size_t>(i)]);
      std::copy(out.logits.value().begin(), out.logits.value().end(),
                logits.values.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i) * k));
    } catch (...) {
#pragma omp critical(conslide_eval_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  std::vector<std::size_t> labels;
  std::vector<std::uint32_t> tasks;
  for (const auto& b : bags) {
    labels.push_back(b.label);
    tasks.push_back(b.task_id);
  }
  auto res = evaluate_logits(logits, std::move(labels), std::move(tasks), class_map, seen_class_end, scenario);
  for (const auto& b : bags) res.sample_ids.push_back(b.sample_id);
  return res;
}

namespace {

struct PooledMetrics {
  std::optional<double> auc;
  std::vector<std::optional<double>> per_class;
  double acc = 0.0;
  double masked_acc = 0.0;
};

// Metrics over the union of the given per-task evaluations, restricted to the
// first `seen` classes.
PooledMetrics pool(const std::vector<EvalResult>& evals, std::size_t seen) {
  PooledMetrics out;
  ScoreMatrix scores{0, seen, {}};
  std::vector<std::size_t> labels;
  std::size_t correct = 0, masked = 0;
  for (const auto& e : evals) {
    for (std::size_t i = 0; i < e.labels.size(); ++i) {
      for (std::size_t c = 0; c < seen; ++c) scores.values.push_back(e.probabilities(i, c));
      labels.push_back(e.labels[i]);
      correct += e.predictions[i] == e.labels[i];
      masked += e.masked_predictions[i] == e.labels[i];
    }
    scores.samples += e.labels.size();
  }
  if (labels.empty()) return out;
  out.acc = static_cast<double>(correct) / static_cast<double>(labels.size());
  out.masked_acc = static_cast<double>(masked) / static_cast<double>(labels.size());
  if (seen >= 2) {
    try {
      auto auc = auc_ovr(scores, labels);
      out.auc = auc.macro;
      out.per_class = auc.per_class;
    } catch (const ConfigError& e) {
      logging::warn("AUC unavailable: %s", e.what());
    }
  }
  return out;
}

Tensor task_ranges_tensor(const std::vector<TaskInfo>& tasks) {
  Tensor t({tasks.size(), 3});
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    t.data[3 * i] = tasks[i].task_id;
    t.data[3 * i + 1] = tasks[i].class_begin;
    t.data[3 * i + 2] = tasks[i].class_end;
  }
  return t;
}

}  // namespace

RunResult run_sequence(const TaskSequence& seq, const HitConfig& hit, const TrainConfig& cfg,
                       const RunOptions& options) {
  using clock = std::chrono::steady_clock;
  const auto run_start = clock::now();
  seq.validate();
  hit.validate();
  cfg.validate();
  if (hit.num_classes_total < seq.total_classes())
    throw ConfigError("model has " + std::to_string(hit.num_classes_total) + " classes but the sequence needs " +
                      std::to_string(seq.total_classes()));
  std::size_t total_regions = 0, total_bags = 0;
  for (const auto& split : {&seq.train, &seq.test})
    for (const auto& task : *split)
      for (const auto& bag : task) {
        if (bag.channels() != hit.channels)
          throw ConfigError("bag " + bag.sample_id + " has C=" + std::to_string(bag.channels()) + ", model expects " +
                            std::to_string(hit.channels));
        if (split == &seq.train) {
          total_regions += bag.regions();
          ++total_bags;
        }
      }

  HitModel model(hit, derive_seed(cfg.seed, 1));
  CsslProjector projector(hit.channels, cfg.projection_dim, derive_seed(cfg.seed, 2));
  auto memory = make_replay_memory(cfg, static_cast<double>(total_regions) / static_cast<double>(total_bags));
  ContinualTrainer trainer(model, projector, *memory, cfg, derive_seed(cfg.seed, 4));
  Rng order_rng(derive_seed(cfg.seed, 5));

  const std::size_t t_count = seq.tasks.size();
  RunResult result;
  result.matrix = AccuracyMatrix(t_count);
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  double sum_acc = 0.0, sum_masked = 0.0, sum_auc = 0.0;
  std::size_t auc_stages = 0;
  PooledMetrics last;
  for (std::size_t stage = 0; stage < t_count; ++stage) {
    const auto stage_start = clock::now();
    const auto& task = seq.tasks[stage];
    std::vector<std::size_t> allowed(task.class_end);
    std::iota(allowed.begin(), allowed.end(), 0);

    const auto& train = seq.train[stage];
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    StageReport report;
    report.stage = stage;
    std::vector<const FeatureBag*> batch;
    for (std::size_t epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
      std::shuffle(order.begin(), order.end(), order_rng);
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        batch.clear();
        for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) batch.push_back(&train[order[k]]);
        try {
          report.mean_loss += trainer.train_step(batch, allowed);
        } catch (const NumericalError& e) {
          throw NumericalError("stage " + std::to_string(stage) + " (task " + task.name + "), epoch " +
                               std::to_string(epoch) + ", step " + std::to_string(report.steps) + ": " + e.what());
        }
        ++report.steps;
      }
    }
    if (report.steps) {
      const double inv = 1.0 / static_cast<double>(report.steps);
      report.mean_loss.ce_current *= inv;
      report.mean_loss.ce_replay *= inv;
      report.mean_loss.cssl_current *= inv;
      report.mean_loss.cssl_replay *= inv;
      report.mean_loss.total *= inv;
    }

    std::vector<EvalResult> evals;
    for (std::size_t j = 0; j < t_count; ++j) {
      if (seq.test[j].empty()) {
        logging::warn("task %zu has no test bags; R(%zu,%zu) recorded as 0", j, stage, j);
        evals.emplace_back();
        continue;
      }
      evals.push_back(evaluate(model, seq.test[j], seq.tasks, task.class_end, cfg.scenario, cfg.workers));
      result.matrix.set(stage, j, evals.back().task_accuracy.at(seq.tasks[j].task_id));
    }
    for (std::size_t j = 0; j < t_count; ++j) report.accuracy_row.push_back(result.matrix(stage, j));
    last = pool(std::vector<EvalResult>(evals.begin(), evals.begin() + static_cast<std::ptrdiff_t>(stage + 1)),
                task.class_end);
    report.auc = last.auc;
    report.acc = last.acc;
    report.masked_acc = last.masked_acc;
    report.buffer_regions = memory->stored_regions();
    sum_acc += last.acc;
    sum_masked += last.masked_acc;
    if (last.auc) {
      sum_auc += *last.auc;
      ++auc_stages;
    }

    if (!options.checkpoint_dir.empty()) {
      std::vector<CheckpointEntry> extra{
          {"meta.stage", Tensor::scalar(static_cast<double>(stage))},
          {"meta.seen_class_end", Tensor::scalar(static_cast<double>(task.class_end))},
          {"meta.task_ranges", task_ranges_tensor(seq.tasks)},
      };
      write_checkpoint(options.checkpoint_dir / ("stage_" + std::to_string(stage) + ".csck"),
                       model_checkpoint(model, std::move(extra)));
      if (const auto* buro = dynamic_cast<const BuroMemory*>(memory.get()))
        write_buffer_snapshot(buro->buffer(), options.checkpoint_dir / ("buffer_stage_" + std::to_string(stage) + ".csbf"));
    }
    report.seconds = std::chrono::duration<double>(clock::now() - stage_start).count();
    logging::info("stage %zu: acc %.4f masked %.4f loss %.4f (%.1fs)", stage, report.acc, report.masked_acc,
                  report.mean_loss.total, report.seconds);
    if (options.on_stage) options.on_stage(report);
    result.stages.push_back(std::move(report));
  }

  auto& m = result.metrics;
  m.auc = last.auc;
  m.per_class_auc = last.per_class;
  m.acc = last.acc;
  m.masked_acc = last.masked_acc;
  m.bwt = bwt(result.matrix);
  m.forgetting = forgetting(result.matrix);
  m.avg_acc = sum_acc / static_cast<double>(t_count);
  m.avg_masked_acc = sum_masked / static_cast<double>(t_count);
  if (auc_stages) m.avg_auc = sum_auc / static_cast<double>(auc_stages);
  result.seconds = std::chrono::duration<double>(clock::now() - run_start).count();
  return result;
}

std::string accuracy_matrix_csv(const AccuracyMatrix& m) {
  std::ostringstream os;
  os << "after_task";
  for (std::size_t j = 0; j < m.tasks(); ++j) os << ",task_" << j;
  os << '\n';
  char buf[64];
  for (std::size_t i = 0; i < m.tasks(); ++i) {
    os << i;
    for (std::size_t j = 0; j < m.tasks(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
      os << ',' << buf;
    }
    os << '\n';
  }
  return os.str();
}

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json metrics_json(const MetricReport& m, const AccuracyMatrix& matrix) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& v : m.per_class_auc) per_class.push_back(opt(v));
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < matrix.tasks(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < matrix.tasks(); ++j) row.push_back(matrix(i, j));
    rows.push_back(row);
  }
  return {{"auc", opt(m.auc)},
          {"acc", m.acc},
          {"masked_acc", m.masked_acc},
          {"bwt", opt(m.bwt)},
          {"forgetting", opt(m.forgetting)},
          {"per_class_auc", per_class},
          {"avg_auc", opt(m.avg_auc)},
          {"avg_acc", m.avg_acc},
          {"avg_masked_acc", m.avg_masked_acc},
          {"accuracy_matrix", rows}};
}

nlohmann::json run_report_json(const RunResult& r, const HitConfig& hit, const TrainConfig& cfg) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : r.stages) {
    stages.push_back({{"stage", s.stage},
                      {"accuracy_row", s.accuracy_row},
                      {"auc", opt(s.auc)},
                      {"acc", s.acc},
                      {"masked_acc", s.masked_acc},
                      {"steps", s.steps},
                      {"buffer_regions", s.buffer_regions},
                      {"seconds", s.seconds},
                      {"mean_loss",
                       {{"ce_current", s.mean_loss.ce_current},
                        {"ce_replay", s.mean_loss.ce_replay},
                        {"cssl_current", s.mean_loss.cssl_current},
                        {"cssl_replay", s.mean_loss.cssl_replay},
                        {"total", s.mean_loss.total}}}});
  }
  return {{"config", {{"model", to_json(hit)}, {"train", to_json(cfg)}}},
          {"stages", stages},
          {"metrics", metrics_json(r.metrics, r.matrix)},
          {"seconds", r.seconds}};
}

}  // namespace conslide

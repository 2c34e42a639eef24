#include "conslide/metrics.hpp"

#include <algorithm>
#include <memory>
#include <numeric>

#include "conslide/errors.hpp"
#include "conslide/logging.hpp"

namespace conslide {

AccuracyMatrix::AccuracyMatrix(std::size_t tasks) : tasks_(tasks), values_(tasks * tasks, 0.0) {
  if (tasks == 0) throw ConfigError("accuracy matrix needs at least one task");
}

AccuracyMatrix::AccuracyMatrix(std::size_t tasks, std::vector<double> values) : AccuracyMatrix(tasks) {
  if (values.size() != tasks * tasks) throw DimensionError("accuracy matrix: expected T*T values");
  for (std::size_t k = 0; k < values.size(); ++k) set(k / tasks, k % tasks, values[k]);
}

void AccuracyMatrix::set(std::size_t i, std::size_t j, double value) {
  if (i >= tasks_ || j >= tasks_) throw DimensionError("accuracy matrix index out of range");
  if (!(value >= 0.0 && value <= 1.0)) throw ConfigError("accuracy matrix entry outside [0,1]");
  values_[i * tasks_ + j] = value;
}

double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw ConfigError("accuracy: need equal, non-empty prediction and label lists");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::size_t argmax_over(const ScoreMatrix& scores, std::size_t sample, std::span<const std::size_t> allowed) {
  if (allowed.empty()) throw ConfigError("argmax_over: empty class set");
  std::size_t best = allowed[0];
  for (auto c : allowed)
    if (scores(sample, c) > scores(sample, best)) best = c;
  return best;
}

double masked_accuracy(const ScoreMatrix& scores, std::span<const std::size_t> labels,
                       std::span<const std::uint32_t> task_ids, std::span<const TaskInfo> class_map) {
  if (labels.empty() || labels.size() != task_ids.size() || labels.size() != scores.samples)
    throw ConfigError("masked_accuracy: inconsistent sample counts");
  std::size_t correct = 0;
  std::vector<std::size_t> allowed;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = std::find_if(class_map.begin(), class_map.end(), [&](const TaskInfo& t) { return t.task_id == task_ids[i]; });
    if (it == class_map.end()) throw ConfigError("masked_accuracy: unknown task id " + std::to_string(task_ids[i]));
    if (labels[i] < it->class_begin || labels[i] >= it->class_end)
      throw ConfigError("masked_accuracy: label " + std::to_string(labels[i]) + " outside task " +
                        std::to_string(task_ids[i]) + " classes");
    allowed.resize(it->class_end - it->class_begin);
    std::iota(allowed.begin(), allowed.end(), static_cast<std::size_t>(it->class_begin));
    correct += argmax_over(scores, i, allowed) == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::optional<double> binary_auc(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw ConfigError("binary_auc: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the Mann-Whitney U, kept integral so ties cost no rounding.
  std::uint64_t twice_u = 0, neg_below = 0, n_pos = 0, n_neg = 0;
  for (std::size_t g = 0; g < order.size();) {
    std::size_t e = g;
    std::uint64_t pos_g = 0, neg_g = 0;
    while (e < order.size() && scores[order[e]] == scores[order[g]]) {
      (positive[order[e]] ? pos_g : neg_g) += 1;
      ++e;
    }
    twice_u += pos_g * (2 * neg_below + neg_g);
    neg_below += neg_g;
    n_pos += pos_g;
    n_neg += neg_g;
    g = e;
  }
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

AucResult auc_ovr(const ScoreMatrix& scores, std::span<const std::size_t> labels) {
  if (labels.size() != scores.samples) throw ConfigError("auc_ovr: label count != sample count");
  if (scores.classes < 2) throw ConfigError("auc_ovr: need at least two classes");
  AucResult res;
  std::vector<double> column(scores.samples);
  auto pos = std::make_unique<bool[]>(scores.samples);
  double total = 0.0;
  std::size_t scored = 0;
  for (std::size_t c = 0; c < scores.classes; ++c) {
    for (std::size_t i = 0; i < scores.samples; ++i) {
      column[i] = scores(i, c);
      pos[i] = labels[i] == c;
    }
    auto auc = binary_auc(column, std::span<const bool>(pos.get(), scores.samples));
    if (!auc) logging::warn("auc_ovr: class %zu lacks positives or negatives; skipped", c);
    if (auc) {
      total += *auc;
      ++scored;
    }
    res.per_class.push_back(auc);
  }
  if (scored == 0) throw ConfigError("auc_ovr: no scorable class");
  res.macro = total / static_cast<double>(scored);
  return res;
}

std::optional<double> bwt(const AccuracyMatrix& r) {
  const std::size_t t = r.tasks();
  if (t < 2) return std::nullopt;
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < t; ++i) acc += r(t - 1, i) - r(i, i);
  return acc / static_cast<double>(t - 1);
}

std::optional<double> forgetting(const AccuracyMatrix& r, ForgettingForm form) {
  const std::size_t t = r.tasks();
  if (t < 2) return std::nullopt;
  const std::size_t reference_row = form == ForgettingForm::kFinalRow ? t - 1 : t - 2;
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < t; ++i) {
    double best = r(0, i);
    for (std::size_t s = 1; s + 1 < t; ++s) best = std::max(best, r(s, i));
    acc += best - r(reference_row, i);
  }
  return acc / static_cast<double>(t - 1);
}

}  // namespace conslide

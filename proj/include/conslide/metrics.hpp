#pragma once

// Continual-learning metrics over an accuracy matrix and per-sample scores.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "conslide/data.hpp"

namespace conslide {

/// R(i, j): accuracy on task j after training task i (0-based).
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t tasks);
  AccuracyMatrix(std::size_t tasks, std::vector<double> values);

  std::size_t tasks() const { return tasks_; }
  double operator()(std::size_t i, std::size_t j) const { return values_.at(i * tasks_ + j); }
  /// Throws ConfigError for values outside [0, 1].
  void set(std::size_t i, std::size_t j, double value);
  const std::vector<double>& values() const { return values_; }
  bool operator==(const AccuracyMatrix&) const = default;

 private:
  std::size_t tasks_;
  std::vector<double> values_;
};

/// Fraction of equal entries. Throws ConfigError on empty or unequal inputs.
double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels);

/// Row-major per-sample class scores.
struct ScoreMatrix {
  std::size_t samples = 0;
  std::size_t classes = 0;
  std::vector<double> values;

  double operator()(std::size_t i, std::size_t c) const { return values[i * classes + c]; }
};

/// Index of the largest score among `allowed` classes (first on ties).
std::size_t argmax_over(const ScoreMatrix& scores, std::size_t sample, std::span<const std::size_t> allowed);

/// Argmax restricted to each sample's task classes. Throws ConfigError when a
/// label lies outside its task's class range or the task id is unknown.
double masked_accuracy(const ScoreMatrix& scores, std::span<const std::size_t> labels,
                       std::span<const std::uint32_t> task_ids, std::span<const TaskInfo> class_map);

struct AucResult {
  double macro = 0.0;
  /// Per class; nullopt when the class lacks positives or negatives.
  std::vector<std::optional<double>> per_class;
};

/// One-vs-rest ROC AUC with Mann-Whitney tie credit 0.5, macro-averaged over
/// scorable classes. Throws ConfigError when none is scorable.
AucResult auc_ovr(const ScoreMatrix& scores, std::span<const std::size_t> labels);

/// Binary AUC of `scores` for positives vs negatives via ranks.
std::optional<double> binary_auc(std::span<const double> scores, std::span<const bool> positive);

/// mean_{i < T-1} R(T-1, i) - R(i, i); nullopt when T < 2.
std::optional<double> bwt(const AccuracyMatrix& r);

enum class ForgettingForm {
  kFinalRow,  // max_{t < T-1} R(t, i) - R(T-1, i)
  kLiteral,   // max_{t < T-1} R(t, i) - R(T-2, i)
};

/// Mean over past tasks; nullopt when T < 2.
std::optional<double> forgetting(const AccuracyMatrix& r, ForgettingForm form = ForgettingForm::kFinalRow);

}  // namespace conslide

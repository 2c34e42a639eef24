#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "conslide/data.hpp"
#include "conslide/tensor.hpp"

namespace conslide::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& v : t.data) v = d(rng);
  return t;
}

inline FeatureBag random_bag(Rng& rng, std::size_t m, std::size_t n, std::size_t c, std::uint32_t task = 0,
                             std::uint32_t label = 0, const std::string& id = "bag") {
  FeatureBag b;
  b.sample_id = id;
  b.task_id = task;
  b.label = label;
  b.region_features = random_tensor({m, c}, rng);
  b.patch_features = random_tensor({m, n, c}, rng);
  return b;
}

/// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero components from
/// amplifying finite-difference truncation noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-2) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // "<parameter>[index]"
  std::size_t checked = 0;
  std::size_t straddled = 0;  // coordinates whose stencil crosses a ReLU/max kink
};

/// Central differences of `loss` w.r.t. every entry of `values`, compared
/// against `analytic` (same layout).
inline GradCheck central_difference_check(std::vector<std::vector<double>*> values,
                                          const std::vector<std::vector<double>>& analytic,
                                          const std::vector<std::string>& names, const std::function<double()>& loss,
                                          double h = 1e-3) {
  GradCheck out;
  for (std::size_t p = 0; p < values.size(); ++p) {
    auto& v = *values[p];
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x0 = v[i];
      v[i] = x0 + h;
      const double fp = loss();
      v[i] = x0 - h;
      const double fm = loss();
      v[i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = relative_error(analytic[p][i], numeric);
      ++out.checked;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = names[p] + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

/// Central differences at step `h` for piecewise-smooth objectives. `loss`
/// also reports the tape's branch signature; coordinates whose stencil points
/// leave the linear piece of the unperturbed point are counted in `straddled`
/// and excluded from `max_rel_error`, since no difference quotient across a
/// kink estimates the derivative.
inline GradCheck piecewise_difference_check(std::vector<std::vector<double>*> values,
                                            const std::vector<std::vector<double>>& analytic,
                                            const std::vector<std::string>& names,
                                            const std::function<double(std::vector<std::uint32_t>&)>& loss,
                                            double h) {
  GradCheck out;
  std::vector<std::uint32_t> base, sp, sm;
  loss(base);
  for (std::size_t p = 0; p < values.size(); ++p) {
    auto& v = *values[p];
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x0 = v[i];
      v[i] = x0 + h;
      const double fp = loss(sp);
      v[i] = x0 - h;
      const double fm = loss(sm);
      v[i] = x0;
      ++out.checked;
      if (sp != base || sm != base) {
        ++out.straddled;
        continue;
      }
      const double err = relative_error(analytic[p][i], (fp - fm) / (2.0 * h));
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = names[p] + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

/// Finite-difference check over the free leaves of a tape-built expression.
/// `build` receives a fresh tape and the current input tensors and returns the
/// scalar loss.
inline GradCheck check_leaf_gradients(std::vector<Tensor> inputs,
                                      const std::function<Var(Tape&, const std::vector<Var>&)>& build) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    tape.backward(build(tape, leaves));
    for (const auto& l : leaves) {
      auto g = l.grad();
      analytic.emplace_back(g.begin(), g.end());
      if (analytic.back().empty()) analytic.back().assign(l.numel(), 0.0);
    }
  }
  std::vector<std::vector<double>*> values;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    values.push_back(&inputs[i].data);
    names.push_back("input" + std::to_string(i));
  }
  return central_difference_check(values, analytic, names, [&] {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.constant(t));
    return build(tape, leaves).item();
  });
}

}  // namespace conslide::testing

#pragma once

// Cross-scale similarity learning.
//
// Region features and patch-mean features of the same slide are projected by
// one shared linear map; the loss is the squared Frobenius distance between
// their cosine-similarity matrices. The region branch is a stop-gradient
// target, so the loss only trains the patch branch (PT blocks) and projector.

#include <cstdint>
#include <optional>

#include "conslide/tensor.hpp"

namespace conslide {

class CsslProjector {
 public:
  /// Weight N(0, 0.02^2) of shape [in, out], zero bias. out == 0 selects in.
  CsslProjector(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed);

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  const Parameter& weight() const { return params_[0]; }
  const Parameter& bias() const { return params_[1]; }

  Var project(Tape& tape, Var x) const;

 private:
  std::size_t in_, out_;
  ParameterSet params_;
};

inline constexpr double kCosineEps = 1e-12;

/// Pairwise cosine similarity of rows, [M, D] -> [M, M].
Var similarity_matrix(Var vectors);

/// Mean over the patch axis, [M, N, C] -> [M, C].
Var patch_scale_regions(Var patch_outputs);

struct CsslTerms {
  Var loss;                // scalar
  Tensor region_similarity;  // C^r values used as target
};

/// sum_ij (C^r_ij - C^p_ij)^2 with C^r computed on detached region features.
/// `fixed_region_similarity`, when given, replaces C^r; it lets tests evaluate
/// the stop-gradient objective by finite differences. Returns 0 when M == 1.
CsslTerms cssl_loss(Tape& tape, const CsslProjector& projector, Var region_features, Var patch_outputs,
                    const Tensor* fixed_region_similarity = nullptr);

}  // namespace conslide

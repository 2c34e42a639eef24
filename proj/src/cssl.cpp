#include "conslide/cssl.hpp"

#include <random>

#include "conslide/errors.hpp"
#include "conslide/ops.hpp"

namespace conslide {

CsslProjector::CsslProjector(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed)
    : in_(in_channels), out_(out_channels ? out_channels : in_channels) {
  if (in_ == 0) throw ConfigError("cssl: projector input channels must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  Tensor w({in_, out_});
  for (auto& v : w.data) v = dist(rng);
  params_.add("cssl.proj.weight", ParamGroup::kProjector, std::move(w));
  params_.add("cssl.proj.bias", ParamGroup::kProjector, Tensor({out_}));
}

Var CsslProjector::project(Tape& tape, Var x) const {
  if (x.shape().size() != 2 || x.dim(1) != in_)
    throw DimensionError("cssl projector expects [M," + std::to_string(in_) + "], got " + shape_string(x.shape()));
  return ops::add_bias(ops::matmul(x, tape.param(weight())), tape.param(bias()));
}

Var similarity_matrix(Var vectors) {
  if (vectors.shape().size() != 2) throw DimensionError("similarity_matrix: expected [M,D], got " + shape_string(vectors.shape()));
  Var unit = ops::normalize_rows(vectors, kCosineEps);
  return ops::matmul(unit, ops::transpose(unit));
}

Var patch_scale_regions(Var patch_outputs) {
  if (patch_outputs.shape().size() != 3)
    throw DimensionError("patch_scale_regions: expected [M,N,C], got " + shape_string(patch_outputs.shape()));
  return ops::mean_axis(patch_outputs, 1);
}

CsslTerms cssl_loss(Tape& tape, const CsslProjector& projector, Var region_features, Var patch_outputs,
                    const Tensor* fixed_region_similarity) {
  const Shape& sr = region_features.shape();
  const Shape& sp = patch_outputs.shape();
  if (sr.size() != 2 || sp.size() != 3 || sr[0] != sp[0] || sr[1] != sp[2])
    throw DimensionError("cssl_loss: region " + shape_string(sr) + " inconsistent with patch " + shape_string(sp));
  if (sr[1] != projector.in_channels())
    throw DimensionError("cssl_loss: features have C=" + std::to_string(sr[1]) + ", projector expects " +
                         std::to_string(projector.in_channels()));
  const std::size_t m = sr[0];

  Tensor target;
  if (fixed_region_similarity) {
    if (fixed_region_similarity->shape != Shape{m, m})
      throw DimensionError("cssl_loss: fixed similarity has shape " + shape_string(fixed_region_similarity->shape));
    target = *fixed_region_similarity;
  } else {
    Tape side;
    Var detached = side.constant(region_features.tensor());
    // Reads the projector without binding it on the training tape.
    Var proj = ops::add_bias(ops::matmul(detached, side.constant(projector.weight().value)),
                             side.constant(projector.bias().value));
    target = similarity_matrix(proj).tensor();
  }

  Var patch_sim = similarity_matrix(projector.project(tape, patch_scale_regions(patch_outputs)));
  if (m == 1) return {ops::scale(ops::sum(patch_sim), 0.0), std::move(target)};
  Var diff = ops::sub(tape.constant(target), patch_sim);
  return {ops::sum(ops::mul(diff, diff)), std::move(target)};
}

}  // namespace conslide

#include <gtest/gtest.h>

#include <cmath>

#include "conslide/cssl.hpp"
#include "conslide/errors.hpp"
#include "conslide/hit.hpp"
#include "conslide/ops.hpp"
#include "support.hpp"

namespace conslide {
namespace {

using testing::random_bag;
using testing::random_tensor;

// The norm guard perturbs unit-norm cosines by at most 2 * kCosineEps.
constexpr double kTol = 1e-10;

void set_identity(CsslProjector& p) {
  auto& w = p.parameters()[0].value;
  std::fill(w.data.begin(), w.data.end(), 0.0);
  for (std::size_t i = 0; i < std::min(w.dim(0), w.dim(1)); ++i) w[i * w.dim(1) + i] = 1.0;
}

TEST(SimilarityTest, OrthonormalRows) {
  Tape t;
  auto s = similarity_matrix(t.constant(Tensor({2, 2}, {1, 0, 0, 1}))).value();
  const double expect[] = {1, 0, 0, 1};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(s[i], expect[i], kTol);
}

TEST(SimilarityTest, HandCosine) {
  Tape t;
  auto s = similarity_matrix(t.constant(Tensor({2, 2}, {1, 0, 1, 1}))).value();
  EXPECT_NEAR(s[1], 1.0 / std::sqrt(2.0), kTol);
  EXPECT_NEAR(s[2], 1.0 / std::sqrt(2.0), kTol);
}

TEST(SimilarityTest, UnitDiagonalAndSymmetric) {
  Rng rng(1);
  Tape t;
  auto s = similarity_matrix(t.constant(random_tensor({5, 3}, rng))).value();
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(s[i * 5 + i], 1.0, kTol);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(s[i * 5 + j], s[j * 5 + i]);
  }
}

TEST(SimilarityTest, ZeroRowIsGuarded) {
  Tape t;
  auto s = similarity_matrix(t.constant(Tensor({2, 2}, {0, 0, 1, 0}))).value();
  for (double v : s) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(s[0], 0.0);
}

TEST(PatchScaleTest, Examples) {
  Tape t;
  auto single = patch_scale_regions(t.constant(Tensor({2, 1, 2}, {3, 4, 5, 6})));
  EXPECT_EQ(single.tensor().data, (std::vector<double>{3, 4, 5, 6}));
  auto mean = patch_scale_regions(t.constant(Tensor({1, 2, 2}, {2, 0, 0, 2})));
  EXPECT_EQ(mean.tensor().data, (std::vector<double>{1, 1}));
  auto swapped = patch_scale_regions(t.constant(Tensor({1, 2, 2}, {0, 2, 2, 0})));
  EXPECT_EQ(swapped.tensor().data, mean.tensor().data);
}

TEST(CsslLossTest, CoincidingScalesGiveZero) {
  Rng rng(2);
  CsslProjector proj(4, 0, 3);
  auto r = random_tensor({5, 4}, rng);
  Tensor p({5, 3, 4});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) p[(i * 3 + j) * 4 + k] = r[i * 4 + k];
  Tape t;
  EXPECT_LT(cssl_loss(t, proj, t.constant(r), t.constant(p)).loss.item(), 1e-12);
}

TEST(CsslLossTest, HandOffDiagonalDifference) {
  CsslProjector proj(2, 0, 1);
  set_identity(proj);
  Tensor target({2, 2}, {1, 0.5, 0.5, 1});
  Tape t;
  auto res = cssl_loss(t, proj, t.constant(Tensor({2, 2}, {1, 0, 0, 1})),
                       t.constant(Tensor({2, 1, 2}, {1, 0, 0, 1})), &target);
  EXPECT_NEAR(res.loss.item(), 0.5, 1e-15);
}

TEST(CsslLossTest, NonNegativeAndZeroForSingleRegion) {
  Rng rng(3);
  CsslProjector proj(4, 6, 4);
  for (int i = 0; i < 20; ++i) {
    Tape t;
    const std::size_t m = 1 + static_cast<std::size_t>(i % 5);
    auto v = cssl_loss(t, proj, t.constant(random_tensor({m, 4}, rng)), t.constant(random_tensor({m, 3, 4}, rng)))
                 .loss.item();
    EXPECT_GE(v, 0.0);
    if (m == 1) EXPECT_EQ(v, 0.0);
  }
}

TEST(CsslLossTest, ChannelMismatchThrows) {
  CsslProjector proj(4, 0, 1);
  Tape t;
  EXPECT_THROW(cssl_loss(t, proj, t.constant(Tensor({2, 3})), t.constant(Tensor({2, 1, 3}))), DimensionError);
  EXPECT_THROW(cssl_loss(t, proj, t.constant(Tensor({2, 4})), t.constant(Tensor({3, 1, 4}))), DimensionError);
}

TEST(CsslLossTest, RegionBranchReceivesNoGradient) {
  Rng rng(4);
  CsslProjector proj(4, 0, 5);
  Tape t;
  auto r = t.leaf(random_tensor({3, 4}, rng));
  auto p = t.leaf(random_tensor({3, 2, 4}, rng));
  t.backward(cssl_loss(t, proj, r, p).loss);
  for (double g : r.grad()) EXPECT_EQ(g, 0.0);
  double norm = 0.0;
  for (double g : p.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

HitConfig small_config(std::size_t layers) {
  HitConfig cfg;
  cfg.layers = layers;
  cfg.channels = 4;
  cfg.heads = 2;
  cfg.num_classes_total = 4;
  return cfg;
}

TEST(CsslRoutingTest, OnlyPatchAndProjectorGroupsReceiveGradient) {
  HitModel model(small_config(2), 6);
  CsslProjector proj(4, 0, 7);
  Rng rng(5);
  for (auto& p : model.parameters())
    for (auto& v : p.value.data) v += std::normal_distribution<double>(0.0, 0.3)(rng);
  auto bag = random_bag(rng, 4, 3, 4);
  Tape t;
  auto out = hit_forward(t, model, bag);
  t.backward(cssl_loss(t, proj, out.final_regions, out.patch_outputs.back()).loss);
  double pt_norm = 0.0;
  for (const auto& p : model.parameters()) {
    auto g = t.param_grad(p);
    if (p.group == ParamGroup::kPatch) {
      ASSERT_TRUE(g) << p.name;
      for (double v : *g) pt_norm += v * v;
    } else if (g) {
      for (double v : *g) EXPECT_EQ(v, 0.0) << p.name;
    }
  }
  EXPECT_GT(pt_norm, 0.0);
  for (const auto& p : proj.parameters()) {
    auto g = t.param_grad(p);
    ASSERT_TRUE(g);
    double n = 0.0;
    for (double v : *g) n += v * v;
    EXPECT_GT(n, 0.0) << p.name;
  }
}

TEST(CsslGradientTest, MatchesFiniteDifferencesOfFrozenTargetObjective) {
  HitModel model(small_config(2), 8);
  CsslProjector proj(4, 3, 9);
  Rng rng(6);
  for (auto& p : model.parameters())
    for (auto& v : p.value.data) v += std::normal_distribution<double>(0.0, 0.3)(rng);
  for (auto& p : proj.parameters())
    for (auto& v : p.value.data) v += std::normal_distribution<double>(0.0, 0.5)(rng);
  auto bag = random_bag(rng, 3, 3, 4);

  Tensor target;
  std::vector<std::vector<double>> analytic;
  std::vector<std::vector<double>*> values;
  std::vector<std::string> names;
  {
    Tape t;
    auto out = hit_forward(t, model, bag);
    auto terms = cssl_loss(t, proj, out.final_regions, out.patch_outputs.back());
    target = terms.region_similarity;
    t.backward(terms.loss);
    auto add = [&](Parameter& p) {
      auto g = t.param_grad(p);
      analytic.emplace_back(g ? std::vector<double>(g->begin(), g->end()) : std::vector<double>(p.value.numel(), 0.0));
      values.push_back(&p.value.data);
      names.push_back(p.name);
    };
    for (auto& p : model.parameters())
      if (p.group == ParamGroup::kPatch) add(p);
    for (auto& p : proj.parameters()) add(p);
  }
  auto loss = [&] {
    Tape t;
    auto out = hit_forward(t, model, bag);
    return cssl_loss(t, proj, out.final_regions, out.patch_outputs.back(), &target).loss.item();
  };
  // Small step keeps every ReLU on one side of its kink.
  auto res = testing::central_difference_check(values, analytic, names, loss, 1e-5);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

}  // namespace
}  // namespace conslide

#include <gtest/gtest.h>

#include <random>

#include "agf/all.hpp"
#include "oracles.hpp"

using namespace agf;

namespace {

const std::string kFixtures = AGF_FIXTURE_DIR;

Tensor vec(std::vector<double> v) { return Tensor::vector(std::move(v)); }

Linear linear_layer(Tensor w) {
  const std::size_t out = w.shape()[0];
  return Linear{std::move(w), Tensor({out}, 0.0)};
}

}  // namespace

TEST(GenericRule, IdentityLinearPassesRelevanceThrough) {
  const Layer l = linear_layer(Tensor({2, 2}, {1, 0, 0, 1}));
  const Tensor R = generic_rule(l, vec({1, 1}), vec({1, 2}), {InputTransform::raw, WeightTransform::raw, 1e-9});
  EXPECT_NEAR(R[0], 1.0, 1e-8);
  EXPECT_NEAR(R[1], 2.0, 1e-8);
}

TEST(GenericRule, ProportionalSplit) {
  const Layer l = linear_layer(Tensor({1, 2}, {1, 1}));
  const Tensor R = generic_rule(l, vec({1, 2}), vec({3}), {InputTransform::raw, WeightTransform::raw, 1e-9});
  EXPECT_NEAR(R[0], 1.0, 1e-8);
  EXPECT_NEAR(R[1], 2.0, 1e-8);
}

TEST(GenericRule, LinearMatchesDoubleLoop) {
  std::mt19937_64 rng(100);
  const GenericRuleConfig cfgs[] = {kAbsoluteInfluenceRule, kInputAgnosticRule, kLrpRule,
                                    {InputTransform::absolute, WeightTransform::absolute, 1e-9}};
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor w = oracle::random_tensor(rng, {3, 4});
    const Tensor x = oracle::random_tensor(rng, {4});
    const Tensor r = oracle::random_tensor(rng, {3});
    for (const auto& cfg : cfgs) {
      const Tensor got = generic_rule(linear_layer(w), x, r, cfg);
      const Tensor want = oracle::rule_linear(x, w, r, cfg);
      for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(got[i], want[i], 1e-6) << "trial " << trial;
    }
  }
}

TEST(GenericRule, ConvMatchesTapLoop) {
  std::mt19937_64 rng(101);
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u}) {
      const Tensor w = oracle::random_tensor(rng, {3, 2, 3, 3});
      const Conv2d conv{w, Tensor({3}, 0.0), stride, pad};
      const Tensor x = oracle::random_tensor(rng, {2, 7, 7});
      const Tensor r = oracle::random_tensor(rng, output_shape(Layer{conv}, x.shape()));
      for (const auto& cfg : {kAbsoluteInfluenceRule, kInputAgnosticRule, kLrpRule}) {
        const Tensor got = generic_rule(Layer{conv}, x, r, cfg);
        const Tensor want = oracle::rule_conv(x, w, stride, pad, r, cfg);
        for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6 * (1 + std::abs(want[i])));
      }
    }
}

TEST(GenericRule, ConservesWhenDenominatorsArePositive) {
  std::mt19937_64 rng(102);
  const Conv2d conv{oracle::random_tensor(rng, {4, 3, 3, 3}), Tensor({4}, 0.0), 1, 1};
  const Tensor x = oracle::random_tensor(rng, {3, 6, 6});
  const Tensor r = oracle::random_tensor(rng, {4, 6, 6});
  const Tensor R = generic_rule(Layer{conv}, x, r, kAbsoluteInfluenceRule);
  EXPECT_NEAR(sum(R), sum(r), 1e-10 * std::abs(sum(r)) + 1e-12);
  const Tensor A = generic_rule(Layer{conv}, x, r, kInputAgnosticRule);
  EXPECT_NEAR(sum(A), sum(r), 1e-10 * std::abs(sum(r)) + 1e-12);
}

TEST(GenericRule, ScalesLinearlyWithRelevance) {
  std::mt19937_64 rng(103);
  const Layer l = linear_layer(oracle::random_tensor(rng, {5, 6}));
  const Tensor x = oracle::random_tensor(rng, {6});
  const Tensor r = oracle::random_tensor(rng, {5});
  const Tensor a = generic_rule(l, x, r, kAbsoluteInfluenceRule);
  const Tensor b = generic_rule(l, x, scale(r, 3.5), kAbsoluteInfluenceRule);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], 3.5 * a[i], 1e-12);
}

TEST(GenericRule, PoolingAndShapeLayers) {
  const Tensor x({1, 2, 2}, {1, 4, 3, 2});
  const Tensor r({1, 1, 1}, {6.0});
  EXPECT_EQ(generic_rule(MaxPool2d{2, 2}, x, r, kLrpRule), Tensor({1, 2, 2}, {0, 6, 0, 0}));
  const Tensor avg = generic_rule(AvgPool2d{2, 2}, x, r, kLrpRule);
  EXPECT_NEAR(avg[1], 6.0 * 4.0 / 10.0, 1e-8);
  EXPECT_NEAR(sum(avg), 6.0, 1e-8);
  EXPECT_EQ(generic_rule(Flatten{}, x, vec({1, 2, 3, 4}), kLrpRule), Tensor({1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(generic_rule(Relu{}, vec({-1, 2}), vec({3, 4}), kLrpRule), vec({3, 4}));
}

TEST(GenericRule, AbsoluteInfluenceKeepsRelevanceOfDeadPoolWindow) {
  // An all-zero average-pool window has z = 0; the relevance it receives
  // is spread evenly instead of vanishing.
  const Tensor x({1, 2, 2}, 0.0);
  const Tensor R = generic_rule(AvgPool2d{2, 2}, x, Tensor({1, 1, 1}, {2.0}), kAbsoluteInfluenceRule);
  for (double v : R.values()) EXPECT_NEAR(v, 0.5, 1e-12);
  const Tensor lrp_r = generic_rule(AvgPool2d{2, 2}, x, Tensor({1, 1, 1}, {2.0}), kLrpRule);
  EXPECT_EQ(sum(lrp_r), 0.0);
}

TEST(GenericRule, ShapeMismatchThrows) {
  const Layer l = linear_layer(Tensor({2, 3}, 1.0));
  EXPECT_THROW(generic_rule(l, vec({1, 2, 3}), vec({1, 2, 3}), kLrpRule), shape_error);
}

TEST(DeltaShift, ZeroResidualIsIdentity) {
  EXPECT_EQ(delta_shift(vec({1, -2, 0}), vec({0, 0, 0})), vec({1, -2, 0}));
}

TEST(DeltaShift, WorkedExample) {
  const Tensor out = delta_shift(vec({1, 0, 1}), vec({1, 1, 1}));
  EXPECT_EQ(out, vec({0.5, 1.0, 0.5}));
  EXPECT_EQ(sum(out), 2.0);
}

TEST(DeltaShift, DegenerateCases) {
  EXPECT_THROW(delta_shift(vec({0, 0}), vec({1, 0})), degenerate_input_error);
  EXPECT_EQ(delta_shift(vec({0, 0}), vec({1, -1})), vec({1, -1}));
}

TEST(DeltaShift, BroadcastsSpatialResidual) {
  const Tensor g({2, 1, 2}, {1, 1, 1, 1});
  const Tensor out = delta_shift(g, Tensor({1, 2}, {1, 0}));
  EXPECT_EQ(out, Tensor({2, 1, 2}, {1.5, 0.5, 1.5, 0.5}));
}

TEST(DeltaShift, PreservesSumOnRandomInputs) {
  std::mt19937_64 rng(104);
  std::bernoulli_distribution zero(0.3);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor g = oracle::random_tensor(rng, {64});
    for (double& v : g.values())
      if (zero(rng)) v = 0.0;
    const Tensor r = oracle::random_tensor(rng, {64}, -5, 5);
    EXPECT_NEAR(sum(delta_shift(g, r)), sum(g), 1e-6 * std::abs(sum(g)) + 1e-12);
  }
}

TEST(Lrp, IdentityChainKeepsInitialRelevance) {
  Model m;
  m.input_shape = {3};
  m.class_count = 3;
  Tensor eye({3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye[i * 4] = 1.0;
  m.layers = {linear_layer(eye), linear_layer(eye)};
  m.validate();
  const ForwardTrace tr = forward_preprocessed(m, vec({0.2, 0.5, 0.3}));
  const Tensor R = lrp(m, tr, 1);
  EXPECT_NEAR(R[0], 0.0, 1e-12);
  EXPECT_NEAR(R[1], 0.5, 1e-8);
  EXPECT_NEAR(R[2], 0.0, 1e-12);
}

TEST(Lrp, NegativeWeightPathGetsNothing) {
  Model m;
  m.input_shape = {2};
  m.class_count = 1;
  m.layers = {linear_layer(Tensor({1, 2}, {1.0, -1.0}))};
  m.validate();
  const Tensor R = lrp(m, forward_preprocessed(m, vec({1.0, 0.5})), 0);
  EXPECT_EQ(R[1], 0.0);
  EXPECT_NEAR(R[0], 0.5, 1e-8);
}

TEST(Lrp, ConservesTargetLogitOnFixture) {
  // The fixture net is bias-free up to the ReLUs, so the z⁺ rule is close to
  // conservative; biases leak a little relevance.
  const Model m = load_modelpack(kFixtures + "/models/tiny_net.nnpk");
  const ForwardTrace tr = forward(m, read_pnm(kFixtures + "/tiny_image.ppm"));
  const std::size_t t = argmax(tr.logits);
  EXPECT_NEAR(sum(lrp(m, tr, t)), tr.logits[t], 1e-3 * std::abs(tr.logits[t]));
}

TEST(Clrp, InitialRelevance) {
  const ContrastiveInit init = clrp_initial_relevance(vec({2, 1}), 0);
  EXPECT_EQ(init.target, vec({2, 0}));
  EXPECT_EQ(init.rest, vec({0, 1}));
  EXPECT_THROW(clrp_initial_relevance(vec({1}), 0), degenerate_input_error);
}

TEST(Clrp, ZeroRestGivesTargetRelevance) {
  Model m;
  m.input_shape = {2};
  m.class_count = 2;
  m.layers = {linear_layer(Tensor({2, 2}, {1, 2, 0, 0}))};
  m.validate();
  const ForwardTrace tr = forward_preprocessed(m, vec({1, 1}));
  ASSERT_EQ(tr.logits[1], 0.0);
  EXPECT_EQ(clrp(m, tr, 0), lrp(m, tr, 0));
}

TEST(Clrp, ComposesTwoLrpPasses) {
  const Model m = load_modelpack(kFixtures + "/models/toy_classifier.nnpk");
  const ForwardTrace tr = forward(m, read_pnm(kFixtures + "/val/images/val_001.ppm"));
  const std::size_t t = 1;
  Tensor r_tgt(tr.logits.shape(), 0.0), r_rst(tr.logits.shape(), 0.0);
  r_tgt[t] = tr.logits[t];
  for (std::size_t i = 0; i < tr.logits.size(); ++i)
    if (i != t) r_rst[i] = tr.logits[i] / double(tr.logits.size() - 1);
  const Tensor a = propagate_relevance(m, tr, r_tgt, kLrpRule);
  const Tensor b = propagate_relevance(m, tr, r_rst, kLrpRule);
  double sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) sa += a[i], sb += b[i];
  const Tensor got = clrp(m, tr, t);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(got[i], a[i] - b[i] * sa / sb, 1e-9);
}

TEST(GradCam, UnitWeightReturnsPositivePart) {
  const Tensor x({1, 2, 2}, {1, -2, 3, 0});
  const Tensor g({1, 2, 2}, {0.25, 0.25, 0.25, 0.25});
  EXPECT_EQ(grad_cam_map(x, g), Tensor({2, 2}, {1, 0, 3, 0}));
}

TEST(GradCam, NegativeWeightsClipToZero) {
  const Tensor x({2, 2, 2}, {1, 2, 3, 4, 0, 1, 2, 3});
  const Tensor g({2, 2, 2}, -1.0);
  EXPECT_EQ(grad_cam_map(x, g), Tensor({2, 2}, 0.0));
  EXPECT_THROW(grad_cam_map(vec({1, 2}), vec({1, 2})), shape_error);
}

TEST(GradCam, MatchesLoopOracle) {
  std::mt19937_64 rng(105);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = oracle::random_tensor(rng, {2, 2, 2});
    const Tensor g = oracle::random_tensor(rng, {2, 2, 2});
    const Tensor got = grad_cam_map(x, g), want = oracle::grad_cam(x, g);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(GradCam, DefaultLayerFollowsLastConvBlock) {
  const Model m = load_modelpack(kFixtures + "/models/toy_classifier.nnpk");
  const std::size_t n = default_gradcam_layer(m);
  const std::size_t k = m.execution_index(n);
  EXPECT_TRUE(std::holds_alternative<Conv2d>(m.layers[k - 2]));
  EXPECT_TRUE(std::holds_alternative<Relu>(m.layers[k - 1]));
}

TEST(Resize, IdentityAndConstant) {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(resize_bilinear(a, 2, 2), a);
  const Tensor c = resize_bilinear(Tensor({3, 3}, 7.0), 9, 12);
  for (double v : c.values()) EXPECT_NEAR(v, 7.0, 1e-12);
}

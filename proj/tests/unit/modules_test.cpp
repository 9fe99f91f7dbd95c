#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <string>

#include "fixtures.hpp"
#include "jdnet/gradcheck.hpp"
#include "jdnet/losses.hpp"
#include "jdnet/modules.hpp"
#include "reference.hpp"

namespace jdnet {
namespace {

using fixtures::random_tensor;

template <typename T>
void randomize_biases(ConvParams<T>& p, Rng& rng) {
  for (auto& v : p.bias.data()) v = static_cast<T>(rng.uniform(-0.3, 0.3));
}

template <typename T>
bool all_zero(const Tensor<T>& t) {
  const auto g = t.grad();
  return std::all_of(g.begin(), g.end(), [](T v) { return v == T(0); });
}

template <typename T>
bool any_nonzero(const Tensor<T>& t) {
  return !all_zero(t);
}

ModelConfig attention_config(int footprint = 7) {
  ModelConfig c;
  c.footprint = footprint;
  c.reduction = 4;
  c.share = 1;
  return c;
}

SelfAttention<double> random_attention(int channels, const ModelConfig& config, Rng& rng) {
  auto a = SelfAttention<double>::make(channels, config, rng);
  for (auto* p : {&a.phi, &a.psi, &a.beta, &a.gamma_hidden, &a.gamma_out, &a.expand}) randomize_biases(*p, rng);
  for (auto& v : a.bn.scale.data()) v = rng.uniform(0.5, 1.5);
  for (auto& v : a.bn.shift.data()) v = rng.uniform(-0.2, 0.2);
  return a;
}

// -- self-attention ------------------------------------------------------------

TEST(SelfAttention, MatchesBruteForceOnFiveByFive) {
  Rng rng(100);
  for (int share : {1, 2}) {
    ModelConfig config = attention_config();
    config.share = share;
    auto a = random_attention(8, config, rng);
    const auto x = random_tensor<double>({1, 8, 5, 5}, rng);
    SelfAttention<double>::Trace trace;
    const auto y = a.forward(x, true, &trace);
    const auto want = ref::self_attention(ref::from(x), a);
    EXPECT_LE(ref::max_rel_diff(trace.weights, want.weights), 1e-5) << "share " << share;
    EXPECT_LE(ref::max_rel_diff(trace.aggregated, want.aggregated), 1e-5) << "share " << share;
    EXPECT_LE(ref::max_rel_diff(y, want.output), 1e-5) << "share " << share;
  }
}

TEST(SelfAttention, UnnormalizedWeightsMatchBruteForce) {
  Rng rng(101);
  ModelConfig config = attention_config(3);
  config.attention_normalize = AttentionNorm::None;
  auto a = random_attention(8, config, rng);
  const auto x = random_tensor<double>({2, 8, 5, 5}, rng);
  SelfAttention<double>::Trace trace;
  const auto y = a.forward(x, true, &trace);
  const auto want = ref::self_attention(ref::from(x), a);
  EXPECT_LE(ref::max_rel_diff(trace.aggregated, want.aggregated), 1e-5);
  EXPECT_LE(ref::max_rel_diff(y, want.output), 1e-5);
}

TEST(SelfAttention, ConstantLogitsAverageInBoundsValues) {
  Rng rng(102);
  auto a = random_attention(8, attention_config(), rng);
  for (auto& v : a.gamma_out.weight.data()) v = 0.0;
  for (auto& v : a.gamma_out.bias.data()) v = 0.7;
  const auto x = random_tensor<double>({1, 8, 5, 5}, rng);
  SelfAttention<double>::Trace trace;
  (void)a.forward(x, true, &trace);
  const ref::Array beta = ref::conv2d(ref::from(x), a.beta);
  for (int k = 0; k < beta.c; ++k)
    for (int h = 0; h < 5; ++h)
      for (int w = 0; w < 5; ++w) {
        double total = 0;
        int count = 0;
        for (int y = std::max(0, h - 3); y <= std::min(4, h + 3); ++y)
          for (int x2 = std::max(0, w - 3); x2 <= std::min(4, w + 3); ++x2) {
            total += beta.at(0, k, y, x2);
            ++count;
          }
        EXPECT_NEAR(trace.aggregated.at(0, k, h, w), total / count, 1e-12);
      }
}

TEST(SelfAttention, WeightsAreADistributionPerPositionAndGroup) {
  Rng rng(103);
  ModelConfig config = attention_config();
  auto a = SelfAttention<float>::make(16, config, rng);
  const auto x = random_tensor<float>({2, 16, 9, 11}, rng, -3, 3);
  SelfAttention<float>::Trace trace;
  (void)a.forward(x, true, &trace);
  const int P = 49;
  for (int n = 0; n < 2; ++n)
    for (int g = 0; g < a.groups(); ++g)
      for (int h = 0; h < 9; ++h)
        for (int w = 0; w < 11; ++w) {
          double total = 0;
          for (int p = 0; p < P; ++p) {
            const float v = trace.weights.at(n, g * P + p, h, w);
            ASSERT_GE(v, 0.0f);
            total += v;
          }
          EXPECT_NEAR(total, 1.0, 1e-5);
        }
}

TEST(SelfAttention, ShapeIsPreservedForSmallImages) {
  Rng rng(104);
  for (auto [h, w, footprint] : {std::tuple{1, 1, 3}, {1, 5, 3}, {3, 2, 5}, {4, 4, 7}}) {
    auto a = SelfAttention<float>::make(8, attention_config(footprint), rng);
    const auto x = random_tensor<float>({2, 8, h, w}, rng);
    EXPECT_EQ(a.forward(x, true).shape(), x.shape());
  }
}

TEST(SelfAttention, ZeroInputGivesZeroOutput) {
  Rng rng(105);
  auto a = SelfAttention<float>::make(8, attention_config(), rng);
  const auto y = a.forward(Tensor<float>({1, 8, 6, 6}), true);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(SelfAttention, OversizedFootprintRejected) {
  Rng rng(106);
  auto a = SelfAttention<float>::make(8, attention_config(7), rng);
  EXPECT_THROW((void)a.forward(Tensor<float>({1, 8, 2, 8}), true), ShapeError);
  EXPECT_NO_THROW((void)a.forward(Tensor<float>({1, 8, 3, 8}), true));
}

TEST(SelfAttention, InvalidChannelSplitsRejected) {
  Rng rng(107);
  EXPECT_THROW((void)SelfAttention<float>::make(10, attention_config(), rng), ShapeError);
  ModelConfig config = attention_config();
  config.share = 3;
  EXPECT_THROW((void)SelfAttention<float>::make(8, config, rng), ShapeError);
}

// -- scale aggregation -----------------------------------------------------------

TEST(ScaleAggregation, FourScalesOnSixtyFour) {
  Rng rng(110);
  auto s = ScaleAggregation<float>::make(32, 4, rng);
  const auto x = random_tensor<float>({1, 32, 64, 64}, rng);
  EXPECT_EQ(s.forward(x).shape(), x.shape());
  EXPECT_EQ(s.fuse.in_channels(), 5 * 32);
}

TEST(ScaleAggregation, SingleScaleFusesTwoWidths) {
  Rng rng(111);
  auto s = ScaleAggregation<float>::make(6, 1, rng);
  EXPECT_EQ(s.fuse.in_channels(), 12);
  EXPECT_EQ(s.fuse.out_channels(), 6);
  EXPECT_EQ(s.forward(random_tensor<float>({2, 6, 4, 6}, rng)).shape(), (Shape{2, 6, 4, 6}));
}

TEST(ScaleAggregation, ZeroInputGivesZeroOutput) {
  Rng rng(112);
  auto s = ScaleAggregation<float>::make(4, 3, rng);
  for (float v : s.forward(Tensor<float>({1, 4, 16, 16})).data()) EXPECT_EQ(v, 0.0f);
}

TEST(ScaleAggregation, IndivisibleSizeStatesRequirement) {
  Rng rng(113);
  auto s = ScaleAggregation<float>::make(4, 4, rng);
  try {
    (void)s.forward(Tensor<float>({1, 4, 24, 32}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible by 16"), std::string::npos) << e.what();
  }
}

// -- self-calibrated convolution ---------------------------------------------------

SelfCalibratedConv<double> random_sc(int channels, int rate, Rng& rng) {
  auto sc = SelfCalibratedConv<double>::make(channels, rate, rng);
  for (auto* p : {&sc.split1, &sc.split2, &sc.k1, &sc.k2, &sc.k3, &sc.k4}) randomize_biases(*p, rng);
  return sc;
}

TEST(SelfCalibratedConv, MatchesComposedReference) {
  Rng rng(120);
  auto sc = random_sc(4, 2, rng);
  const auto x = random_tensor<double>({1, 4, 8, 8}, rng);
  const auto y = sc.forward(x);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_LE(ref::max_rel_diff(y, ref::self_calibrated_conv(ref::from(x), sc)), 1e-9);
}

TEST(SelfCalibratedConv, ZeroInputGivesZeroOutput) {
  Rng rng(121);
  auto sc = SelfCalibratedConv<float>::make(8, 4, rng);
  for (float v : sc.forward(Tensor<float>({1, 8, 16, 16})).data()) EXPECT_EQ(v, 0.0f);
}

TEST(SelfCalibratedConv, RateFourPoolsSixtyFourToSixteen) {
  Rng rng(122);
  auto sc = SelfCalibratedConv<float>::make(8, 4, rng);
  SelfCalibratedConv<float>::Trace trace;
  (void)sc.forward(random_tensor<float>({1, 8, 64, 64}, rng), &trace);
  EXPECT_EQ(trace.pooled.shape(), (Shape{1, 4, 16, 16}));
}

TEST(SelfCalibratedConv, OutputHalvesDependOnSeparatePaths) {
  Rng rng(123);
  auto sc = random_sc(4, 2, rng);
  const auto x = random_tensor<double>({1, 4, 8, 8}, rng);
  const std::vector<Tensor<double>> first_path{sc.split1.weight, sc.k2.weight, sc.k3.weight, sc.k4.weight};
  const std::vector<Tensor<double>> second_path{sc.split2.weight, sc.k1.weight};
  auto run = [&](int begin, int end) {
    for (auto* p : {&sc.split1, &sc.split2, &sc.k1, &sc.k2, &sc.k3, &sc.k4}) {
      p->weight.set_requires_grad(true);
      p->weight.zero_grad();
    }
    clear_tape<double>();
    backward(sum(slice_channels(sc.forward(x), begin, end)));
  };
  run(0, 2);
  for (const auto& w : first_path) EXPECT_TRUE(any_nonzero(w));
  for (const auto& w : second_path) EXPECT_TRUE(all_zero(w));
  run(2, 4);
  for (const auto& w : first_path) EXPECT_TRUE(all_zero(w));
  for (const auto& w : second_path) EXPECT_TRUE(any_nonzero(w));
}

TEST(SelfCalibratedConv, InvalidInputsRejected) {
  Rng rng(124);
  EXPECT_THROW((void)SelfCalibratedConv<float>::make(5, 2, rng), ShapeError);
  auto sc = SelfCalibratedConv<float>::make(4, 4, rng);
  EXPECT_THROW((void)sc.forward(Tensor<float>({1, 4, 6, 8})), ShapeError);
}

// -- joint unit -------------------------------------------------------------------

ModelConfig small_config() {
  ModelConfig c;
  c.units = 2;
  c.channels = 8;
  c.scales = 2;
  c.pool_rate = 2;
  c.footprint = 3;
  return c;
}

TEST(JointUnit, R1LeavesOtherModulesWithoutGradient) {
  Rng rng(130);
  auto unit = JointUnit<float>::make(16, small_config(), Ablation::R1, rng, true);
  TensorList<float> params;
  unit.collect("u", params);
  for (auto& p : params) p.tensor.set_requires_grad(true);
  clear_tape<float>();
  backward(sum(unit.forward(random_tensor<float>({1, 16, 8, 8}, rng), Ablation::R1, true)));
  int checked = 0;
  for (const auto& p : params) {
    if (!p.trainable) continue;
    const bool in_scale_agg = p.name.starts_with("u.compress") || p.name.starts_with("u.scale_agg");
    if (p.name.ends_with(".bias") || p.name.ends_with(".shift")) {
      if (!in_scale_agg) EXPECT_TRUE(all_zero(p.tensor)) << p.name;
      continue;
    }
    EXPECT_EQ(in_scale_agg, any_nonzero(p.tensor)) << p.name;
    ++checked;
  }
  EXPECT_GT(checked, 10);
}

TEST(JointUnit, R2IsR1FollowedBySelfCalibratedConv) {
  Rng rng(131);
  auto unit = JointUnit<double>::make(16, small_config(), Ablation::R3, rng);
  const auto x = random_tensor<double>({1, 16, 8, 8}, rng);
  JointUnit<double>::Trace r1, r2;
  const auto y1 = unit.forward(x, Ablation::R1, true, &r1);
  const auto y2 = unit.forward(x, Ablation::R2, true, &r2);
  EXPECT_TRUE(r1.after_sc_conv.empty());
  const auto replay = unit.sc_conv->forward(y1);
  ASSERT_EQ(replay.shape(), y2.shape());
  for (std::size_t i = 0; i < y2.numel(); ++i) EXPECT_EQ(replay.data()[i], y2.data()[i]);
}

TEST(JointUnit, R3KeepsShape) {
  Rng rng(132);
  auto unit = JointUnit<float>::make(24, small_config(), Ablation::R3, rng);
  JointUnit<float>::Trace trace;
  const auto y = unit.forward(random_tensor<float>({2, 24, 8, 8}, rng), Ablation::R3, true, &trace);
  EXPECT_EQ(y.shape(), (Shape{2, 8, 8, 8}));
  EXPECT_EQ(trace.after_attention.shape(), y.shape());
}

TEST(JointUnit, UnknownAblationTagRejected) {
  EXPECT_EQ(parse_ablation("R2"), Ablation::R2);
  EXPECT_THROW((void)parse_ablation("R4"), ShapeError);
  EXPECT_THROW((void)parse_ablation(""), ShapeError);
}

TEST(JointUnit, MissingModuleRejected) {
  Rng rng(133);
  auto unit = JointUnit<float>::make(8, small_config(), Ablation::R1, rng);
  EXPECT_THROW((void)unit.forward(Tensor<float>({1, 8, 8, 8}), Ablation::R3, true), ShapeError);
}

// -- full network -------------------------------------------------------------------

TEST(JDNet, DefaultConfigIsThirtyTwoByThirtyTwo) {
  const ModelConfig c;
  EXPECT_EQ(c.units, 32);
  EXPECT_EQ(c.channels, 32);
  EXPECT_EQ(c.scales, 4);
  EXPECT_EQ(c.pool_rate, 4);
  EXPECT_EQ(c.footprint, 7);
  EXPECT_EQ(c.spatial_multiple(), 16);
}

TEST(JDNet, DenseCompressWidthsGrowByChannels) {
  ModelConfig c = small_config();
  c.units = 4;
  const auto net = JDNet<float>::make(c, 1);
  ASSERT_EQ(net.units().size(), 4u);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(net.units()[k].compress.in_channels(), static_cast<int>(k + 1) * 8);
  EXPECT_EQ(net.head.in_channels(), 3);
  EXPECT_EQ(net.tail.out_channels(), 3);
}

TEST(JDNet, ZeroRainLeavesInputUnchanged) {
  auto net = JDNet<float>::make(small_config(), 2);
  for (auto& v : net.tail.weight.data()) v = 0.0f;
  Rng rng(140);
  const auto o = random_tensor<float>({1, 3, 16, 16}, rng, 0, 1);
  const auto out = net.forward(o, false);
  for (float v : out.rain.data()) EXPECT_EQ(v, 0.0f);
  for (std::size_t i = 0; i < o.numel(); ++i) EXPECT_EQ(out.background.data()[i], o.data()[i]);
}

TEST(JDNet, BackgroundIsInputMinusRain) {
  auto net = JDNet<float>::make(small_config(), 3);
  Rng rng(141);
  const auto o = random_tensor<float>({2, 3, 8, 8}, rng, 0, 1);
  const auto out = net.forward(o, true);
  EXPECT_EQ(out.background.shape(), o.shape());
  for (std::size_t i = 0; i < o.numel(); ++i) EXPECT_EQ(out.background.data()[i], o.data()[i] - out.rain.data()[i]);
}

TEST(JDNet, IndivisibleInputRejected) {
  auto net = JDNet<float>::make(small_config(), 4);
  try {
    (void)net.forward(Tensor<float>({1, 3, 10, 8}), true);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible by 4"), std::string::npos) << e.what();
  }
  EXPECT_THROW((void)net.forward(Tensor<float>({1, 1, 8, 8}), true), ShapeError);
}

TEST(JDNet, EveryParameterReceivesGradientFromNegSsim) {
  ModelConfig c;
  c.units = 3;
  c.channels = 8;
  auto net = JDNet<float>::make(c, 5);
  Rng rng(142);
  // Random biases so no ReLU-like path starts exactly dead.
  auto params = net.parameters();
  for (auto& p : params) {
    if (p.name.ends_with(".bias"))
      for (auto& v : p.tensor.data()) v = static_cast<float>(rng.uniform(-0.05, 0.05));
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  const auto o = random_tensor<float>({1, 3, 64, 64}, rng, 0, 1);
  const auto b = random_tensor<float>({1, 3, 64, 64}, rng, 0, 1);
  clear_tape<float>();
  backward(neg_ssim_loss(net.forward(o, true).background, b));
  for (const auto& p : params) EXPECT_TRUE(any_nonzero(p.tensor)) << p.name;
}

TEST(JDNet, EndToEndGradientMatchesFiniteDifferences) {
  ModelConfig c;
  c.units = 2;
  c.channels = 4;
  c.reduction = 2;
  auto net = JDNet<double>::make(c, 6);
  Rng rng(143);
  const auto o = random_tensor<double>({1, 3, 16, 16}, rng, 0, 1);
  const auto b = random_tensor<double>({1, 3, 16, 16}, rng, 0, 1);
  std::vector<Tensor<double>> inputs;
  for (const auto& p : net.parameters()) inputs.push_back(p.tensor);
  GradCheckOptions options;
  options.tolerance = 1e-3;
  options.max_elements_per_input = 3;
  const auto report = finite_diff_check(
      "jdnet", [&] { return neg_ssim_loss(net.forward(o, true).background, b); }, inputs, options);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

}  // namespace
}  // namespace jdnet

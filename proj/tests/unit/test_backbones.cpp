#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "layer_checks.hpp"
#include "vegcast/backbones.hpp"
#include "vegcast/models/models.hpp"

using namespace vegcast;
using vegcast::testing::random_tensor;
using vegcast::testing::randomize;

namespace {

constexpr int kF = static_cast<int>(kWeatherVariables.size()) * kWeatherStats;

EncoderDecoderConfig small_encdec() {
  EncoderDecoderConfig c;
  c.hidden = 4;
  c.groups = 2;
  c.downsample = 4;
  return c;
}

// Moves sample b of a [N, ...] tensor to position perm[b].
Tensor<double> permute_samples(const Tensor<double>& t, const std::vector<int>& perm) {
  Tensor<double> out(t.shape());
  const std::size_t per = t.size() / static_cast<std::size_t>(t.dim(0));
  for (int b = 0; b < t.dim(0); ++b)
    std::copy_n(t.data() + b * per, per, out.data() + static_cast<std::size_t>(perm[b]) * per);
  return out;
}

void expect_near(const Tensor<double>& a, const Tensor<double>& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], tol) << "at " << i;
}

}  // namespace

TEST(Backbones, EncoderDecoderShapes) {
  std::mt19937_64 rng(1);
  ParamStore<double> ps(1);
  const auto cfg = small_encdec();
  PatchMergeEncoder<double> enc(ps, "enc", 3, cfg);
  PatchMergeDecoder<double> dec(ps, "dec", 2, cfg);
  auto x = constant(random_tensor({2, 3, 8, 12}, rng));
  auto e = enc(x);
  EXPECT_EQ(e.latent->value.shape(), (Shape{2, 4, 2, 3}));
  ASSERT_EQ(e.skips.size(), 2u);
  EXPECT_EQ(e.skips[0]->value.shape(), (Shape{2, 4, 8, 12}));
  EXPECT_EQ(e.skips[1]->value.shape(), (Shape{2, 4, 4, 6}));
  EXPECT_EQ(dec(e.latent, e.skips)->value.shape(), (Shape{2, 2, 8, 12}));
  EXPECT_THROW(enc(constant(random_tensor({1, 3, 6, 8}, rng))), ContractError);
}

TEST(Backbones, UNetShapesAndDivisibility) {
  std::mt19937_64 rng(2);
  ParamStore<double> ps(2);
  UNet<double> net(ps, "unet", 3, 5, 2, small_encdec());
  EXPECT_EQ(net(constant(random_tensor({2, 3, 8, 4}, rng)))->value.shape(), (Shape{2, 5, 8, 4}));
  EXPECT_THROW(net(constant(random_tensor({1, 3, 6, 8}, rng))), ContractError);
}

TEST(Backbones, UNetSkipAblationChangesOutput) {
  std::mt19937_64 rng(3);
  ParamStore<double> ps(3);
  UNet<double> net(ps, "unet", 2, 1, 2, small_encdec());
  randomize(ps, rng);
  auto x = constant(random_tensor({1, 2, 8, 8}, rng));
  const auto with = net(x)->value;
  net.set_skips(false);
  const auto without = net(x)->value;
  net.set_skips(true);
  double diff = 0;
  for (std::size_t i = 0; i < with.size(); ++i) diff = std::max(diff, std::abs(with[i] - without[i]));
  EXPECT_GT(diff, 1e-6);
  expect_near(net(x)->value, with, 0.0);
}

TEST(Backbones, BatchPermutationEquivariance) {
  std::mt19937_64 rng(4);
  ParamStore<double> ps(4);
  const auto cfg = small_encdec();
  PatchMergeEncoder<double> enc(ps, "enc", 3, cfg);
  UNet<double> unet(ps, "unet", 3, 2, 2, cfg);
  ConvLstmCell<double> cell(ps, "cell", 3, 4, 3);
  auto x = random_tensor({3, 3, 8, 8}, rng);
  const std::vector<int> perm{2, 0, 1};
  auto px = permute_samples(x, perm);
  expect_near(enc(constant(px)).latent->value, permute_samples(enc(constant(x)).latent->value, perm), 1e-12);
  expect_near(unet(constant(px))->value, permute_samples(unet(constant(x))->value, perm), 1e-12);
  auto s0 = zero_state<double>(3, 4, 8, 8);
  expect_near(cell(constant(px), s0).h->value, permute_samples(cell(constant(x), s0).h->value, perm), 1e-12);
}

TEST(Backbones, ConvLstmReceptiveFieldFollowsKernel) {
  std::mt19937_64 rng(5);
  for (int k : {1, 3}) {
    ParamStore<double> ps(5);
    ConvLstmCell<double> cell(ps, "cell", 2, 3, k);
    auto x = random_tensor({1, 2, 7, 7}, rng);
    auto s0 = zero_state<double>(1, 3, 7, 7);
    const auto base = cell(constant(x), s0).h->value;
    x.at(0, 1, 3, 3) += 1.0;
    const auto moved = cell(constant(x), s0).h->value;
    const int r = k / 2;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 7; ++y)
        for (int xx = 0; xx < 7; ++xx) {
          const bool inside = std::abs(y - 3) <= r && std::abs(xx - 3) <= r;
          if (!inside) EXPECT_EQ(base.at(0, c, y, xx), moved.at(0, c, y, xx)) << "k=" << k;
        }
    EXPECT_NE(base.at(0, 0, 3, 3), moved.at(0, 0, 3, 3));
  }
}

TEST(Backbones, GstaBlockCanRealizeIdentity) {
  std::mt19937_64 rng(6);
  ParamStore<double> ps(6);
  GstaBlock<double> block(ps, "gsta", 4, 3);
  auto& sw = block.spatial().weight->value;
  std::fill(sw.values().begin(), sw.values().end(), 0.0);
  for (int c = 0; c < 4; ++c) sw.at(c, 0, 1, 1) = 1.0;
  std::fill(block.spatial().bias->value.values().begin(), block.spatial().bias->value.values().end(), 0.0);
  auto& tw = block.temporal().weight->value;
  std::fill(tw.values().begin(), tw.values().end(), 0.0);
  for (int c = 0; c < 4; ++c) tw.at(c, c, 0, 0) = 1.0;
  std::fill(block.temporal().bias->value.values().begin(), block.temporal().bias->value.values().end(), 0.0);
  std::fill(block.gate().weight->value.values().begin(), block.gate().weight->value.values().end(), 0.0);
  std::fill(block.gate().bias->value.values().begin(), block.gate().bias->value.values().end(), 40.0);
  auto x = random_tensor({2, 4, 5, 5}, rng);
  expect_near(block(constant(x))->value, x, 1e-12);
}

TEST(Backbones, GstaTranslatorMapsStepCounts) {
  std::mt19937_64 rng(7);
  ParamStore<double> ps(7);
  GstaTranslator<double> tr(ps, "tr", 3, 5, 2, 2, 3);
  EXPECT_EQ(tr(constant(random_tensor({2, 6, 4, 4}, rng)))->value.shape(), (Shape{2, 10, 4, 4}));
  EXPECT_THROW(tr(constant(random_tensor({2, 4, 4, 4}, rng))), ContractError);
}

TEST(Backbones, CondPyramidPoolsAndCaches) {
  std::mt19937_64 rng(8);
  auto full = constant(random_tensor({1, 2, 8, 8}, rng));
  CondPyramid<double> pyr(full);
  EXPECT_EQ(pyr.at(1), full);
  auto two = pyr.at(2);
  EXPECT_EQ(pyr.at(2), two);
  EXPECT_NEAR(two->value.at(0, 1, 2, 3),
              0.25 * (full->value.at(0, 1, 4, 6) + full->value.at(0, 1, 4, 7) + full->value.at(0, 1, 5, 6) +
                      full->value.at(0, 1, 5, 7)),
              1e-15);
  EXPECT_TRUE(CondPyramid<double>().empty());
}

TEST(Backbones, StLstmZigzagMemoryFlowsFromTopToBottom) {
  auto cfg = ModelConfig::defaults("predrnn-meteo");
  cfg.encdec.hidden = 4;
  cfg.encdec.groups = 2;
  cfg.cells = 3;
  PredRnnModel<double> model(cfg);
  model.trace = true;
  std::mt19937_64 rng(9);
  Batch<double> b;
  b.n = 1, b.t = 3, b.k = 2, b.h = 8, b.w = 8, b.f = kF;
  b.context = random_tensor({1, 3, kFrameChannels, 8, 8}, rng);
  b.future = random_tensor({1, 2, kFrameChannels, 8, 8}, rng);
  b.weather = random_tensor({1, 5, kF, 8, 8}, rng);
  b.target = random_tensor({1, 2, 8, 8}, rng);
  b.mask = Tensor<double>({1, 2, 8, 8}, 1.0);
  model.forward(b);
  ASSERT_EQ(model.zigzag_trace.size(), 4u);
  for (const auto& v : model.zigzag_trace[0].first.values()) EXPECT_EQ(v, 0.0);
  for (std::size_t i = 1; i < model.zigzag_trace.size(); ++i)
    EXPECT_TRUE(bit_equal(model.zigzag_trace[i].first, model.zigzag_trace[i - 1].second)) << "step " << i;
}

TEST(Backbones, EncoderDecoderConfigValidation) {
  auto c = small_encdec();
  c.downsample = 3;
  EXPECT_THROW(c.validate(), ContractError);
  c = small_encdec();
  c.groups = 3;
  EXPECT_THROW(c.validate(), ContractError);
}

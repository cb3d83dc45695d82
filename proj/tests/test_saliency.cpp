#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "meranet/saliency.hpp"

using namespace meranet;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("meranet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<unsigned char> pgm_pixels(const fs::path& p, std::size_t n) {
  std::ifstream in(p, std::ios::binary);
  std::vector<unsigned char> all((std::istreambuf_iterator<char>(in)), {});
  return {all.end() - std::ptrdiff_t(n), all.end()};
}

SaliencyMap constant_map(float v, Shape s = {2, 3, 5}) {
  SaliencyMap m;
  m.upsampled = Tensor<float>(s, v);
  return m;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.channel_plan = {4, 4, 4, 4, 4, 4, 4, 4};
  c.reduction = 4;
  c.st_kernel = 3;
  c.seed = 2;
  return c;
}

}  // namespace

TEST(GradCam, HandComputedConvLinearModel) {
  // x [1,2,1,4,4] -> 1x1x1 conv to 2 channels (A) -> spatial mean -> linear
  Rng rng(1);
  Tensor<double> x({1, 2, 1, 4, 4}), w({2, 2, 1, 1, 1}), fc({3, 2}), fb({3});
  for (auto* t : {&x, &w, &fc, &fb})
    for (auto& v : t->data()) v = rng.normal();
  const std::size_t target = 1;

  Tape<double> tape;
  auto xv = tape.input(x);
  auto a = ad::conv3d(xv, tape.parameter(w), ConvGeometry{});
  auto pooled = ad::reshape(ad::reduce(a, {2, 3, 4}, ReduceKind::mean), {1, 2});
  auto logits = ad::linear(pooled, tape.parameter(fc), tape.parameter(fb));
  const auto map = grad_cam(tape, a, ad::pick(logits, target), {1, 4, 4});

  // dS/dA_c is fc[target,c]/16 everywhere, so the channel weight is the same
  std::vector<double> ref(16);
  double mx = 0;
  for (std::size_t p = 0; p < 16; ++p) {
    double s = 0;
    for (std::size_t co = 0; co < 2; ++co) {
      double act = 0;
      for (std::size_t ci = 0; ci < 2; ++ci) act += w[co * 2 + ci] * x[ci * 16 + p];
      s += fc[target * 2 + co] / 16.0 * act;
    }
    ref[p] = std::max(s, 0.0);
    mx = std::max(mx, ref[p]);
  }
  ASSERT_GT(mx, 0.0);
  ASSERT_EQ(map.values.shape(), (Shape{1, 4, 4}));
  for (std::size_t p = 0; p < 16; ++p) {
    EXPECT_NEAR(map.values[p], ref[p] / mx, 1e-5);
    EXPECT_NEAR(map.upsampled[p], ref[p] / mx, 1e-5);
  }
}

TEST(GradCam, ZeroGradientGivesZeroMap) {
  Rng rng(2);
  Tensor<double> act({1, 3, 2, 2, 2});
  for (auto& v : act.data()) v = rng.normal();
  for (float v : cam_from_gradients(act, Tensor<double>(act.shape()))) EXPECT_EQ(v, 0.0f);

  // a zero head row detaches the target logit from every feature
  auto m = build_model<float>(tiny_config());
  for (std::size_t j = 0; j < m.head_weight.extent(1); ++j) m.head_weight.at(2, j) = 0.0f;
  Tensor<float> clip({3, 4, 16, 16});
  for (auto& v : clip.data()) v = float(rng.normal());
  const auto map = grad_cam(m, clip, 2);
  for (float v : map.upsampled.data()) EXPECT_EQ(v, 0.0f);
}

TEST(GradCam, SingleChannelUniformGradient) {
  Tensor<double> act({1, 1, 2, 2, 2}, std::vector<double>{-1, 2, 0.5, 4, -3, 1, 0, 2});
  const auto map = cam_from_gradients(act, Tensor<double>(act.shape(), 0.25));
  const std::vector<float> expected{0, 0.5f, 0.125f, 1, 0, 0.25f, 0, 0.5f};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_FLOAT_EQ(map[i], expected[i]);
}

TEST(GradCam, ModelLayersAndErrors) {
  auto m = build_model<float>(tiny_config());
  Rng rng(3);
  Tensor<float> clip({3, 4, 16, 16});
  for (auto& v : clip.data()) v = float(rng.normal());
  EXPECT_EQ(default_saliency_layer(m), "block1_8/st");
  const auto map = grad_cam(m, clip, 0);
  EXPECT_EQ(map.upsampled.shape(), (Shape{4, 16, 16}));
  for (float v : map.upsampled.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f + 1e-6f);
  }
  EXPECT_EQ(grad_cam(m, clip, 1, "stem/out").values.shape(), (Shape{4, 8, 8}));
  try {
    grad_cam(m, clip, 0, "block9_9/st");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("block1_1/st"), std::string::npos);
  }
  EXPECT_THROW(grad_cam(m, clip, 3), Error);
}

TEST(Pgm, QuantizationRule) {
  const auto dir = scratch("pgm");
  export_pgm(constant_map(0.0f), 1, dir / "zero.pgm");
  export_pgm(constant_map(1.0f), 0, dir / "one.pgm");
  export_pgm(constant_map(0.5f), 0, dir / "half.pgm");
  for (auto b : pgm_pixels(dir / "zero.pgm", 15)) EXPECT_EQ(b, 0x00);
  for (auto b : pgm_pixels(dir / "one.pgm", 15)) EXPECT_EQ(b, 0xFF);
  for (auto b : pgm_pixels(dir / "half.pgm", 15)) EXPECT_EQ(b, 128);
  EXPECT_THROW(export_pgm(constant_map(0.0f), 2, dir / "bad.pgm"), Error);
}

TEST(Pgm, ParseRoundTrip) {
  Rng rng(4);
  SaliencyMap m;
  m.upsampled = Tensor<float>({1, 6, 9});
  for (auto& v : m.upsampled.data()) v = float(rng.uniform());
  const auto dir = scratch("pgm_rt");
  export_pgm(m, 0, dir / "a.pgm");
  const auto back = read_pgm(dir / "a.pgm");
  ASSERT_EQ(back.shape(), (Shape{6, 9}));
  for (std::size_t i = 0; i < back.numel(); ++i) EXPECT_NEAR(back[i], m.upsampled[i], 1.0 / 255);
}

#include <gtest/gtest.h>

#include <numeric>

#include "meranet/attention.hpp"
#include "oracles.hpp"

using namespace meranet;

namespace {

template <class T = float>
Tensor<T> random_t(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.data()) v = T(scale * rng.normal());
  return t;
}

std::vector<double> as_double(const Tensor<float>& t) {
  return {t.data().begin(), t.data().end()};
}

// Copies f with its channel axis permuted by `perm`.
Tensor<float> permute_channels(const Tensor<float>& f, const std::vector<std::size_t>& perm) {
  Tensor<float> out(f.shape());
  const std::size_t n = f.extent(0), c = f.extent(1), inner = f.numel() / (n * c);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(f.ptr() + (b * c + perm[ch]) * inner, inner, out.ptr() + (b * c + ch) * inner);
  return out;
}

// Copies f with positions inside each (n, c) volume permuted by `perm`.
Tensor<float> permute_positions(const Tensor<float>& f, const std::vector<std::size_t>& perm) {
  Tensor<float> out(f.shape());
  const std::size_t inner = perm.size();
  for (std::size_t r = 0; r < f.numel() / inner; ++r)
    for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] = f[r * inner + perm[i]];
  return out;
}

}  // namespace

TEST(SpatioTemporalAttention, ZeroParametersGiveOneHalf) {
  Rng rng(1);
  const auto f = random_t({1, 3, 2, 4, 4}, rng);
  for (float v : st_attention_map(f, STAttentionParams<float>::zeros(5))) EXPECT_EQ(v, 0.5f);
}

TEST(SpatioTemporalAttention, ChannelPermutationInvariant) {
  Rng rng(2);
  const auto f = random_t({2, 5, 3, 4, 4}, rng);
  const auto p = STAttentionParams<float>::xavier(3, rng);
  EXPECT_EQ(st_attention_map(f, p), st_attention_map(permute_channels(f, {3, 0, 4, 1, 2}), p));
}

TEST(SpatioTemporalAttention, MatchesFormulaOracle) {
  Rng rng(3);
  const auto f = random_t({1, 3, 4, 6, 6}, rng);
  auto p = STAttentionParams<float>::zeros(5);
  p.conv.weight = random_t({1, 2, 5, 5, 5}, rng, 0.2);
  (*p.conv.bias)[0] = 0.3f;
  const auto got = st_attention_map(f, p);
  const auto ref = oracle::st_attention(f, p.conv.weight, 0.3);
  ASSERT_EQ(got.shape(), ref.shape());
  EXPECT_LT(oracle::max_rel_error(got, ref), 1e-5);
}

TEST(SpatioTemporalAttention, RejectsEvenOrNonCubicKernel) {
  STAttentionParams<float> p = STAttentionParams<float>::zeros(3);
  p.conv.weight = Tensor<float>({1, 2, 4, 4, 4});
  EXPECT_THROW(p.validate(), Error);
  p.conv.weight = Tensor<float>({1, 2, 3, 5, 3});
  EXPECT_THROW(p.validate(), Error);
}

TEST(ApplySpatioTemporal, HalfZeroAndBounded) {
  Rng rng(4);
  const auto f = random_t({2, 3, 2, 4, 4}, rng);
  const auto half = apply_spatiotemporal(f, Tensor<float>({2, 1, 2, 4, 4}, 0.5f));
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_EQ(half[i], f[i] * 0.5f);

  Tensor<float> a({2, 1, 2, 4, 4});
  for (auto& v : a.data()) v = float(rng.uniform(0.01, 0.99));
  for (float v : apply_spatiotemporal(Tensor<float>(f.shape()), a)) EXPECT_EQ(v, 0.0f);
  const auto y = apply_spatiotemporal(f, a);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_LE(std::abs(y[i]), std::abs(f[i]));
  EXPECT_THROW(apply_spatiotemporal(f, Tensor<float>({2, 2, 2, 4, 4})), Error);
}

TEST(ChannelAttention, ZeroParametersGiveOneHalf) {
  Rng rng(5);
  const auto f = random_t({1, 32, 2, 4, 4}, rng);
  const auto p = ChannelAttentionParams<float>::zeros(32, 16, ChannelVariant::scnn);
  const auto a = channel_attention_map(f, p);
  EXPECT_EQ(a.shape(), (Shape{1, 32, 1, 1, 1}));
  for (float v : a.data()) EXPECT_EQ(v, 0.5f);
}

TEST(ChannelAttention, PositionPermutationInvariant) {
  Rng rng(6);
  const auto f = random_t({2, 16, 2, 3, 3}, rng);
  const auto p = ChannelAttentionParams<float>::xavier(16, 4, ChannelVariant::smlp, rng);
  std::vector<std::size_t> perm(18);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm.begin(), perm.end());
  const auto a = channel_attention_map(f, p);
  const auto b = channel_attention_map(permute_positions(f, perm), p);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(ChannelAttention, MatchesFormulaOracleAndVariantsAgree) {
  Rng rng(7);
  const auto f = random_t({1, 32, 2, 4, 4}, rng);
  auto scnn = ChannelAttentionParams<float>::xavier(32, 16, ChannelVariant::scnn, rng);
  scnn.squeeze_bias = random_t({2}, rng, 0.3);
  scnn.excite_bias = random_t({32}, rng, 0.3);
  auto smlp = ChannelAttentionParams<float>::zeros(32, 16, ChannelVariant::smlp);
  smlp.squeeze_weight = scnn.squeeze_weight.reshaped({2, 32});
  smlp.excite_weight = scnn.excite_weight.reshaped({32, 2});
  smlp.squeeze_bias = scnn.squeeze_bias;
  smlp.excite_bias = scnn.excite_bias;

  const auto a = channel_attention_map(f, scnn);
  const auto b = channel_attention_map(f, smlp);
  const auto ref = oracle::channel_attention(f, as_double(scnn.squeeze_weight),
                                             as_double(scnn.squeeze_bias),
                                             as_double(scnn.excite_weight),
                                             as_double(scnn.excite_bias));
  for (std::size_t c = 0; c < 32; ++c) {
    EXPECT_NEAR(a[c], ref[0][c], 1e-5);
    EXPECT_NEAR(a[c], b[c], 1e-6);
  }
}

TEST(ChannelAttention, SqueezeWidthRules) {
  EXPECT_EQ(squeeze_extent(64, 16), 4u);
  EXPECT_EQ(squeeze_extent(8, 16), 1u);
  EXPECT_THROW(squeeze_extent(40, 16), Error);
  std::vector<std::string> seen;
  auto& sink = diagnostic_sink();
  const auto saved = sink;
  sink = [&](std::string_view m) { seen.emplace_back(m); };
  const auto p = ChannelAttentionParams<float>::zeros(8, 16, ChannelVariant::scnn);
  sink = saved;
  EXPECT_EQ(p.hidden(), 1u);
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_NE(seen[0].find("clamped"), std::string::npos);
}

TEST(ApplyChannel, OnesMaskAndBroadcastOracle) {
  Rng rng(8);
  const auto f = random_t({2, 3, 2, 3, 3}, rng);
  EXPECT_EQ(apply_channel(f, Tensor<float>({2, 3, 1, 1, 1}, 1.0f)), f);

  Tensor<float> first({2, 3, 1, 1, 1});
  first[0] = first[3] = 1.0f;
  const auto y = apply_channel(f, first);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 54; ++i) {
      const std::size_t ch = i / 18;
      EXPECT_EQ(y[b * 54 + i], ch == 0 ? f[b * 54 + i] : 0.0f);
    }

  Tensor<float> a({2, 3, 1, 1, 1});
  for (auto& v : a.data()) v = float(rng.uniform());
  EXPECT_EQ(apply_channel(f, a), broadcast_mul(f, a));
}

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "meranet/data.hpp"
#include "meranet/synthetic.hpp"

using namespace meranet;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("meranet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

DatasetManifest labelled(const std::vector<std::size_t>& sizes) {
  DatasetManifest m;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    m.classes.push_back("c" + std::to_string(c));
    for (std::size_t i = 0; i < sizes[c]; ++i) {
      ClipEntry e;
      e.id = "c" + std::to_string(c) + "_" + std::to_string(i);
      e.label = c;
      m.clips.push_back(e);
    }
  }
  return m;
}

std::map<std::string, std::vector<std::size_t>> split_counts(const DatasetManifest& m) {
  std::map<std::string, std::vector<std::size_t>> out;
  for (const auto& c : m.clips) {
    auto& v = out[c.split];
    v.resize(m.classes.size());
    ++v[c.label];
  }
  return out;
}

}  // namespace

TEST(ExtractClip, ClampedWindows) {
  EXPECT_EQ(extract_clip(10, 4, 16),
            (std::vector<std::size_t>{0, 0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9}));
  std::vector<std::size_t> all(16);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(extract_clip(16, 8, 16), all);
  EXPECT_EQ(extract_clip(1, 0, 16), std::vector<std::size_t>(16, 0));
  EXPECT_THROW(extract_clip(5, 5, 4), Error);
  EXPECT_THROW(extract_clip(0, 0, 4), Error);
}

TEST(ResizeBilinear, IdentityAndConstant) {
  Rng rng(1);
  Tensor<float> img({3, 112, 112});
  for (auto& v : img.data()) v = float(rng.uniform());
  const auto same = resize_bilinear(img, 112, 112);
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_NEAR(same[i], img[i], 1e-6);
  for (float v : resize_bilinear(Tensor<float>({1, 7, 13}, 7.0f), 112, 112))
    EXPECT_FLOAT_EQ(v, 7.0f);
}

TEST(ResizeBilinear, TwoByTwoToFourByFour) {
  // half-pixel source coordinates 0, 0.25, 0.75, 1 after clamping; the
  // input is linear (2y + x), so the result is 2*c[y] + c[x]
  const Tensor<float> img({1, 2, 2}, std::vector<float>{0, 1, 2, 3});
  const float expected[16] = {0.0f, 0.25f, 0.75f, 1.0f, 0.5f, 0.75f, 1.25f, 1.5f,
                              1.5f, 1.75f, 2.25f, 2.5f, 2.0f, 2.25f, 2.75f, 3.0f};
  const auto out = resize_bilinear(img, 4, 4);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(out[i], expected[i], 1e-6) << i;
}

TEST(Normalize, IdentityMeanAndSelfStatistics) {
  Rng rng(2);
  Tensor<float> clip({3, 2, 4, 4});
  for (auto& v : clip.data()) v = float(rng.uniform());
  EXPECT_EQ(normalize_sample(clip, {0, 0, 0}, {1, 1, 1}), clip);

  Tensor<float> flat({3, 2, 2, 2});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 8; ++i) flat[c * 8 + i] = float(c) * 0.3f;
  for (float v : normalize_sample(flat, {0.0, 0.3f, 0.6f}, {1, 2, 3}))
    EXPECT_NEAR(v, 0.0f, 1e-7);

  std::vector<Tensor<float>> set(4, Tensor<float>({3, 2, 4, 4}));
  std::vector<const Tensor<float>*> ptrs;
  for (auto& t : set) {
    for (auto& v : t.data()) v = float(rng.uniform(0.2, 0.9));
    ptrs.push_back(&t);
  }
  const auto st = channel_statistics(ptrs);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0, n = 0;
    for (const auto& t : set) {
      const auto z = normalize_sample(t, st.mean, st.stdev);
      for (std::size_t i = 0; i < 32; ++i) {
        s += z[c * 32 + i];
        s2 += double(z[c * 32 + i]) * z[c * 32 + i];
        n += 1;
      }
    }
    EXPECT_NEAR(s / n, 0.0, 1e-4);
    EXPECT_NEAR(std::sqrt(s2 / n), 1.0, 1e-4);
  }
  EXPECT_THROW(normalize_sample(clip, {0, 0, 0}, {1, 0, 1}), Error);
}

TEST(Flip, InvolutionSymmetryAndFrequency) {
  Rng rng(3);
  Tensor<float> clip({3, 2, 4, 5});
  for (auto& v : clip.data()) v = float(rng.normal());
  EXPECT_EQ(hflip(hflip(clip)), clip);
  EXPECT_NE(hflip(clip), clip);

  Tensor<float> sym({1, 1, 2, 4}, std::vector<float>{1, 2, 2, 1, 5, 0, 0, 5});
  EXPECT_EQ(hflip(sym), sym);

  Rng draws(17);
  std::size_t flips = 0;
  for (int i = 0; i < 10000; ++i) flips += draw_flip(draws);
  EXPECT_GE(flips, 4800u);
  EXPECT_LE(flips, 5200u);
}

TEST(Split, ExactProportions) {
  const auto m = split_dataset(labelled({20, 20}), 0.75, 0.0, 3);
  const auto counts = split_counts(m);
  EXPECT_EQ(counts.at("train"), (std::vector<std::size_t>{15, 15}));
  EXPECT_EQ(counts.at("test"), (std::vector<std::size_t>{5, 5}));
  EXPECT_FALSE(counts.count("val"));
}

TEST(Split, DeterministicPerSeed) {
  const auto a = split_dataset(labelled({10, 12, 9}), 0.8, 0.2, 42);
  const auto b = split_dataset(labelled({10, 12, 9}), 0.8, 0.2, 42);
  const auto c = split_dataset(labelled({10, 12, 9}), 0.8, 0.2, 43);
  bool differs = false;
  for (std::size_t i = 0; i < a.clips.size(); ++i) {
    EXPECT_EQ(a.clips[i].split, b.clips[i].split);
    differs = differs || a.clips[i].split != c.clips[i].split;
  }
  EXPECT_TRUE(differs);
}

TEST(Split, StratifiedRounding) {
  const auto counts = split_counts(split_dataset(labelled({18, 22, 17}), 0.8, 0.0, 0));
  const auto& test = counts.at("test");
  const bool ok = test == std::vector<std::size_t>{4, 4, 3} || test == std::vector<std::size_t>{4, 5, 3};
  EXPECT_TRUE(ok) << test[0] << "," << test[1] << "," << test[2];
  EXPECT_THROW(split_dataset(labelled({2, 10}), 0.8, 0.2, 0), Error);
}

TEST(MeraFormat, ScalarByteLayout) {
  const auto bytes = encode_tensor(Tensor<float>({1}, 2.5f));
  const unsigned char expected[20] = {'M', 'E', 'R', 'A', 1, 0, 0, 0, 1, 0,
                                      0,   0,   1,   0,   0, 0, 0, 0, 0x20, 0x40};
  ASSERT_EQ(bytes.size(), 20u);
  EXPECT_EQ(std::memcmp(bytes.data(), expected, 20), 0);
}

TEST(MeraFormat, RoundTripAndCorruption) {
  Rng rng(4);
  Tensor<float> t({2, 3, 4});
  for (auto& v : t.data()) v = float(rng.normal());
  t[5] = -0.0f;
  const auto dir = scratch("mera");
  write_tensor(dir / "t.mera", t);
  const auto back = read_tensor(dir / "t.mera");
  ASSERT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::memcmp(back.ptr(), t.ptr(), 4 * t.numel()), 0);

  auto bytes = encode_tensor(t);
  auto code_of = [](const std::vector<unsigned char>& b) {
    try {
      decode_tensor(b);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::io;  // no error
  };
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(code_of(bad), Errc::bad_magic);
  EXPECT_EQ(code_of({bytes.begin(), bytes.end() - 1}), Errc::truncated);
  EXPECT_EQ(code_of({bytes.begin(), bytes.begin() + 14}), Errc::truncated);
  bad = bytes;
  bad[4] = 2;
  EXPECT_EQ(code_of(bad), Errc::version_mismatch);
  bad = bytes;
  bad.push_back(0);
  EXPECT_EQ(code_of(bad), Errc::parse);
}

TEST(Netpbm, PpmRoundTripWithinQuantization) {
  Rng rng(5);
  Tensor<float> img({3, 5, 7});
  for (auto& v : img.data()) v = float(rng.uniform());
  const auto dir = scratch("ppm");
  write_ppm(dir / "a.ppm", img);
  const auto back = read_ppm(dir / "a.ppm");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_NEAR(back[i], img[i], 0.5 / 255 + 1e-6);

  std::ofstream(dir / "c.ppm") << "P3\n1 1\n255\n1 2 3\n";
  EXPECT_THROW(read_ppm(dir / "c.ppm"), Error);
  std::ofstream(dir / "d.ppm", std::ios::binary) << "P6\n# note\n2 2\n255\n\x01\x02";
  EXPECT_THROW(read_ppm(dir / "d.ppm"), Error);
}

TEST(Manifest, RoundTripAndErrors) {
  auto m = labelled({3, 3});
  m.clips[0].apex = 2;
  m.clips[0].frames = {"a.ppm", "b.ppm", "c.ppm"};
  m.clips[1].split = "val";
  const auto back = manifest_from_json(manifest_to_json(m), "/x");
  ASSERT_EQ(back.clips.size(), 6u);
  EXPECT_EQ(back.clips[0].apex, 2u);
  EXPECT_EQ(back.clips[1].split, "val");

  auto j = manifest_to_json(m);
  j["clips"][0].erase("label");
  try {
    manifest_from_json(j, "/x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::missing_key);
    EXPECT_NE(std::string(e.what()).find("label"), std::string::npos);
  }
  m.clips[2].label = 7;
  EXPECT_THROW(m.validate(), Error);
}

TEST(Preprocess, WritesNormalizedClipsFromTrainingStatistics) {
  const auto dir = scratch("prep");
  SynthOptions so;
  so.clips_per_class = 4;
  so.val_per_class = 1;
  so.frames = 6;
  so.size = 16;
  generate_synthetic(dir / "raw", so);
  PreprocessOptions po;
  po.t = 4;
  po.size = 8;
  const auto m = preprocess(load_manifest(dir / "raw" / "manifest.json"), dir / "prep", po);
  EXPECT_EQ(m.count("train"), 9u);
  EXPECT_EQ(m.count("val"), 3u);

  const auto reloaded = load_manifest(dir / "prep" / "manifest.json");
  const auto train = load_split(reloaded, "train");
  ASSERT_EQ(train.size(), 9u);
  EXPECT_EQ(train[0].tensor.shape(), (Shape{3, 4, 8, 8}));
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0, n = 0;
    for (const auto& smp : train)
      for (std::size_t i = 0; i < 4 * 64; ++i) {
        const double v = smp.tensor[c * 256 + i];
        s += v;
        s2 += v * v;
        n += 1;
      }
    EXPECT_NEAR(s / n, 0.0, 1e-4);
    EXPECT_NEAR(std::sqrt(s2 / n - (s / n) * (s / n)), 1.0, 1e-4);
  }
  // frame folders remain reachable from the new manifest location
  for (const auto& c : reloaded.clips)
    EXPECT_TRUE(fs::is_directory(reloaded.base_dir / c.frames_dir)) << c.frames_dir;
}

TEST(StackBatch, OrderAndFlip) {
  std::vector<ClipSample> s(2);
  s[0].tensor = Tensor<float>({1, 1, 1, 2}, std::vector<float>{1, 2});
  s[1].tensor = Tensor<float>({1, 1, 1, 2}, std::vector<float>{3, 4});
  const auto b = stack_batch(s, {1, 0}, {true, false});
  EXPECT_EQ(b.shape(), (Shape{2, 1, 1, 1, 2}));
  EXPECT_EQ(std::vector<float>(b.data().begin(), b.data().end()), (std::vector<float>{4, 3, 1, 2}));
}

#pragma once

// Generator for a small labelled clip set with class-specific moving shapes:
//   0 "sweep_h"  tall bar moving horizontally
//   1 "sweep_v"  wide bar moving vertically
//   2 "pulse"    disc whose radius oscillates
// Position, direction, phase, colours and pixel noise vary per clip.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>

#include "meranet/data.hpp"
#include "meranet/random.hpp"

namespace meranet {

struct SynthOptions {
  std::size_t clips_per_class = 10;
  std::size_t val_per_class = 2;
  std::size_t frames = 20;
  std::size_t size = 64;
  double noise = 0.05;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& synthetic_classes() {
  static const std::vector<std::string> names{"sweep_h", "sweep_v", "pulse"};
  return names;
}

/// Renders frame `f` of a clip of class `label` as [3,size,size] in [0,1].
inline Tensor<float> synthetic_frame(std::size_t label, std::size_t f, std::size_t frames,
                                     std::size_t size, std::uint64_t clip_seed, double noise) {
  Rng rng(clip_seed);
  const double n = double(size);
  const double fg[3] = {rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)};
  const double bg[3] = {rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)};
  const double dir = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double cx = rng.uniform(0.3, 0.7) * n, cy = rng.uniform(0.3, 0.7) * n;
  const double phase = rng.uniform(0, 2 * std::numbers::pi);
  const double u = double(f) / double(frames > 1 ? frames - 1 : 1);  // 0..1 over the clip

  auto inside = [&](double x, double y) {
    switch (label) {
      case 0: {
        const double px = n * (0.5 + dir * (u - 0.5) * 0.8);
        return std::abs(x - px) < n * 0.06 && std::abs(y - cy) < n * 0.3;
      }
      case 1: {
        const double py = n * (0.5 + dir * (u - 0.5) * 0.8);
        return std::abs(y - py) < n * 0.06 && std::abs(x - cx) < n * 0.3;
      }
      default: {
        const double r = n * (0.16 + 0.1 * std::sin(phase + 4 * std::numbers::pi * u));
        return std::hypot(x - cx, y - cy) < r;
      }
    }
  };
  Rng px_rng(mix_seed(clip_seed, f + 1));
  Tensor<float> img({3, size, size});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const bool on = inside(double(x) + 0.5, double(y) + 0.5);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (on ? fg[c] : bg[c]) + noise * px_rng.normal();
        img[(c * size + y) * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return img;
}

/// Writes frames/<id>/fNNN.ppm and a raw manifest.json (with split tags,
/// without tensors) under `dir`.
inline DatasetManifest generate_synthetic(const fs::path& dir, const SynthOptions& opt = {}) {
  require(opt.val_per_class < opt.clips_per_class, Errc::invalid_argument,
          "synthetic: val_per_class must be < clips_per_class");
  require(opt.frames >= 1 && opt.size >= 4, Errc::invalid_argument,
          "synthetic: need >= 1 frame of at least 4x4 pixels");
  DatasetManifest m;
  m.classes = synthetic_classes();
  m.base_dir = dir;
  for (std::size_t label = 0; label < m.classes.size(); ++label)
    for (std::size_t k = 0; k < opt.clips_per_class; ++k) {
      char id[64];
      std::snprintf(id, sizeof id, "%s_%02zu", m.classes[label].c_str(), k);
      const std::uint64_t clip_seed = mix_seed(opt.seed, path_hash(id));
      ClipEntry e;
      e.id = id;
      e.label = label;
      e.frames_dir = "frames/" + e.id;
      e.split = k < opt.val_per_class ? "val" : "train";
      Rng rng(mix_seed(clip_seed, 0xa9e));
      const std::size_t jitter = opt.frames / 8;
      e.apex = opt.frames / 2 - jitter + rng.below(2 * jitter + 1);
      fs::create_directories(dir / e.frames_dir);
      for (std::size_t f = 0; f < opt.frames; ++f) {
        char name[32];
        std::snprintf(name, sizeof name, "f%03zu.ppm", f);
        write_ppm(dir / e.frames_dir / name,
                  synthetic_frame(label, f, opt.frames, opt.size, clip_seed, opt.noise));
        e.frames.push_back(name);
      }
      m.clips.push_back(std::move(e));
    }
  save_manifest(dir / "manifest.json", m);
  return m;
}

}  // namespace meranet

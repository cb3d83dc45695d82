#pragma once

// Grad-CAM over 3D feature volumes and PGM export.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "meranet/autodiff.hpp"
#include "meranet/data.hpp"
#include "meranet/model.hpp"

namespace meranet {

struct SaliencyMap {
  Tensor<float> values;     // [T_l, H_l, W_l] at layer resolution, in [0,1]
  Tensor<float> upsampled;  // [T, H, W] at clip resolution
  std::size_t target = 0;
  std::string layer;
};

/// ReLU(sum_c w_c A_c) with w_c the mean of G_c over (T,H,W), normalized
/// by its maximum when positive. A and G are [1,C,T,H,W] or [C,T,H,W].
template <class T>
Tensor<float> cam_from_gradients(const Tensor<T>& act, const Tensor<T>& grad) {
  require(act.shape() == grad.shape(), Errc::shape_mismatch,
          "grad_cam: activation and gradient shapes differ");
  Shape s = act.shape();
  if (s.size() == 5) {
    require(s[0] == 1, Errc::shape_mismatch, "grad_cam works on a single clip");
    s.erase(s.begin());
  }
  require(s.size() == 4, Errc::shape_mismatch, "grad_cam expects a [C,T,H,W] feature volume");
  const std::size_t c = s[0], inner = s[1] * s[2] * s[3];
  std::vector<double> map(inner, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double w = 0;
    const T* g = grad.ptr() + ch * inner;
    for (std::size_t i = 0; i < inner; ++i) w += g[i];
    w /= double(inner);
    const T* a = act.ptr() + ch * inner;
    for (std::size_t i = 0; i < inner; ++i) map[i] += w * double(a[i]);
  }
  double mx = 0;
  for (auto& v : map) {
    v = std::max(v, 0.0);
    mx = std::max(mx, v);
  }
  Tensor<float> out({s[1], s[2], s[3]});
  for (std::size_t i = 0; i < inner; ++i)
    out[i] = static_cast<float>(mx > 0 ? map[i] / mx : map[i]);
  return out;
}

/// Trilinear resize of [T,H,W] with half-pixel centres, coordinates clamped.
inline Tensor<float> upsample_trilinear(const Tensor<float>& v, const Shape& out) {
  require(v.rank() == 3 && out.size() == 3, Errc::shape_mismatch,
          "upsample_trilinear expects [T,H,W]");
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t n) {
    std::vector<Tap> t(n);
    for (std::size_t o = 0; o < n; ++o) {
      const double src =
          std::clamp((double(o) + 0.5) * double(in) / double(n) - 0.5, 0.0, double(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      t[o] = {i0, std::min(i0 + 1, in - 1), src - double(i0)};
    }
    return t;
  };
  const auto& s = v.shape();
  const auto tt = taps(s[0], out[0]), th = taps(s[1], out[1]), tw = taps(s[2], out[2]);
  auto at = [&](std::size_t a, std::size_t b, std::size_t c) {
    return double(v[(a * s[1] + b) * s[2] + c]);
  };
  Tensor<float> r(out);
  for (std::size_t a = 0; a < out[0]; ++a)
    for (std::size_t b = 0; b < out[1]; ++b)
      for (std::size_t c = 0; c < out[2]; ++c) {
        const auto &x = tt[a], &y = th[b], &z = tw[c];
        auto plane = [&](std::size_t t) {
          const double top = (1 - z.f) * at(t, y.i0, z.i0) + z.f * at(t, y.i0, z.i1);
          const double bot = (1 - z.f) * at(t, y.i1, z.i0) + z.f * at(t, y.i1, z.i1);
          return (1 - y.f) * top + y.f * bot;
        };
        r[(a * out[1] + b) * out[2] + c] =
            static_cast<float>((1 - x.f) * plane(x.i0) + x.f * plane(x.i1));
      }
  return r;
}

/// Grad-CAM of `score` (a scalar node) with respect to `activation` on any
/// tape; the map is upsampled to `clip_extents` = [T,H,W].
template <class T>
SaliencyMap grad_cam(Tape<T>& tape, const Var<T>& activation, const Var<T>& score,
                     const Shape& clip_extents, std::string layer = {},
                     std::size_t target = 0) {
  const auto g = backward(tape, score, {activation});
  SaliencyMap m;
  m.values = cam_from_gradients(activation.value(), g.wrt(activation));
  m.upsampled = upsample_trilinear(m.values, clip_extents);
  m.target = target;
  m.layer = std::move(layer);
  return m;
}

/// Feature volume used when no layer is named: the last block's
/// post-attention output, or its main-path output without attention.
template <class T>
std::string default_saliency_layer(const ModelGraph<T>& m) {
  const auto& last = m.blocks.back();
  return last.name + (last.st_attn ? "/st" : "/conv");
}

/// Grad-CAM for one preprocessed clip [3,T,H,W] in inference mode. Layers
/// are addressed as "block{i}_{j}/{conv1,conv,ch,st,out}" or "stem/out".
template <class T>
SaliencyMap grad_cam(ModelGraph<T>& m, const Tensor<T>& clip, std::size_t target,
                     std::string layer = {}) {
  require(clip.rank() == 4, Errc::shape_mismatch, "grad_cam expects a [3,T,H,W] clip");
  require(target < m.config.num_classes, Errc::out_of_range,
          "grad_cam: target class " + std::to_string(target) + " >= " +
              std::to_string(m.config.num_classes) + " classes");
  if (layer.empty()) layer = default_saliency_layer(m);
  Shape bs{1};
  bs.insert(bs.end(), clip.shape().begin(), clip.shape().end());
  Tape<T> tape;
  auto r = forward(m, tape.input(clip.reshaped(bs)), Mode::infer);
  auto it = r.taps.find(layer);
  if (it == r.taps.end() || it->second.shape().size() != 5) {
    std::string known;
    for (const auto& [name, v] : r.taps)
      if (v.shape().size() == 5) known += (known.empty() ? "" : ", ") + name;
    throw Error(Errc::invalid_argument,
                "unknown saliency layer '" + layer + "' (available: " + known + ")");
  }
  auto score = ad::pick(r.logits, target);
  return grad_cam(tape, it->second, score,
                  Shape{clip.extent(1), clip.extent(2), clip.extent(3)}, layer, target);
}

/// One frame of the upsampled map as 8-bit binary PGM, v -> floor(255 v + 0.5).
inline void export_pgm(const SaliencyMap& map, std::size_t frame, const fs::path& path) {
  const auto& u = map.upsampled;
  require(u.rank() == 3, Errc::shape_mismatch, "export_pgm: map is not [T,H,W]");
  require(frame < u.extent(0), Errc::out_of_range,
          "export_pgm: frame " + std::to_string(frame) + " >= " + std::to_string(u.extent(0)));
  const std::size_t h = u.extent(1), w = u.extent(2);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> px(h * w);
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = detail::quantize_unit(u[frame * h * w + i]);
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  require(static_cast<bool>(out), Errc::io, "write failed: " + path.string());
}

}  // namespace meranet

#pragma once

// Numerical kernels over Tensor. Every function here is pure: inputs are
// read-only and a fresh tensor is returned. Accumulation inside convolution
// and reduction loops is carried out in double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "meranet/error.hpp"
#include "meranet/parallel.hpp"
#include "meranet/tensor.hpp"

namespace meranet {

struct Triple {
  std::size_t t = 1, h = 1, w = 1;
  friend bool operator==(const Triple&, const Triple&) = default;
};

struct ConvGeometry {
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
};

/// Zero padding that keeps extents unchanged for an odd kernel at stride 1.
inline Triple same_padding(Triple kernel) {
  require(kernel.t % 2 == 1 && kernel.h % 2 == 1 && kernel.w % 2 == 1,
          Errc::invalid_argument, "same padding requires odd kernel extents");
  return {(kernel.t - 1) / 2, (kernel.h - 1) / 2, (kernel.w - 1) / 2};
}

template <class T>
struct ConvParams {
  Tensor<T> weight;  // [C_out, C_in, k_t, k_h, k_w]
  std::optional<Tensor<T>> bias;  // [C_out]
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};

  ConvGeometry geometry() const { return {stride, padding}; }
  std::size_t out_channels() const { return weight.extent(0); }
  std::size_t in_channels() const { return weight.extent(1); }
  Triple kernel() const {
    return {weight.extent(2), weight.extent(3), weight.extent(4)};
  }
};

template <class T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormParams identity(std::size_t channels) {
    return {Tensor<T>({channels}, T(1)), Tensor<T>({channels}, T(0)),
            Tensor<T>({channels}, T(0)), Tensor<T>({channels}, T(1))};
  }
  std::size_t channels() const { return gamma.numel(); }
};

enum class Mode { train, infer };
enum class ReduceKind { mean, max, sum };
enum class Activation { relu, sigmoid };

// ---------------------------------------------------------------------------
// convolution

/// floor((in + 2p - k)/s) + 1, or an error when the window does not fit.
inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t s,
                                   std::size_t p) {
  require(s >= 1, Errc::invalid_argument, "convolution stride must be >= 1");
  const auto span = static_cast<std::int64_t>(in + 2 * p) -
                    static_cast<std::int64_t>(k);
  require(span >= 0, Errc::shape_mismatch,
          "non-positive convolution output extent (in=" + std::to_string(in) +
              ", k=" + std::to_string(k) + ", p=" + std::to_string(p) + ")");
  return static_cast<std::size_t>(span) / s + 1;
}

namespace detail {

struct ConvDims {
  std::size_t n, ci, ti, hi, wi;
  std::size_t co, kt, kh, kw;
  std::size_t to, ho, wo;
  ConvGeometry g;
};

inline ConvDims conv_dims(const Shape& in, const Shape& w,
                          const ConvGeometry& g) {
  require(in.size() == 5, Errc::shape_mismatch,
          "conv3d input must be [N,C,T,H,W], got " + shape_str(in));
  require(w.size() == 5, Errc::shape_mismatch,
          "conv3d weight must be [C_out,C_in,kt,kh,kw], got " + shape_str(w));
  require(in[1] == w[1], Errc::shape_mismatch,
          "conv3d input channels " + std::to_string(in[1]) +
              " do not match weight C_in " + std::to_string(w[1]));
  ConvDims d{in[0], in[1], in[2], in[3], in[4], w[0], w[2], w[3], w[4],
             0,     0,     0,     g};
  d.to = conv_out_extent(d.ti, d.kt, g.stride.t, g.padding.t);
  d.ho = conv_out_extent(d.hi, d.kh, g.stride.h, g.padding.h);
  d.wo = conv_out_extent(d.wi, d.kw, g.stride.w, g.padding.w);
  return d;
}

/// Output positions [lo, hi) whose input tap o*s + k - p lands inside [0, in).
inline std::pair<std::size_t, std::size_t> tap_range(std::size_t in,
                                                     std::size_t out,
                                                     std::size_t s,
                                                     std::size_t p,
                                                     std::size_t k) {
  const auto si = static_cast<std::int64_t>(s);
  const auto off = static_cast<std::int64_t>(k) - static_cast<std::int64_t>(p);
  std::int64_t lo = off >= 0 ? 0 : (-off + si - 1) / si;
  const std::int64_t last = static_cast<std::int64_t>(in) - 1 - off;
  std::int64_t hi = last < 0 ? 0 : last / si + 1;
  hi = std::min<std::int64_t>(hi, static_cast<std::int64_t>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

struct TapTables {
  std::vector<std::pair<std::size_t, std::size_t>> t, h, w;
};

inline TapTables tap_tables(const ConvDims& d) {
  TapTables tab;
  for (std::size_t a = 0; a < d.kt; ++a)
    tab.t.push_back(tap_range(d.ti, d.to, d.g.stride.t, d.g.padding.t, a));
  for (std::size_t b = 0; b < d.kh; ++b)
    tab.h.push_back(tap_range(d.hi, d.ho, d.g.stride.h, d.g.padding.h, b));
  for (std::size_t e = 0; e < d.kw; ++e)
    tab.w.push_back(tap_range(d.wi, d.wo, d.g.stride.w, d.g.padding.w, e));
  return tab;
}

}  // namespace detail

namespace detail {

/// Zero-padded copy of a [N,C,T,H,W] volume with the W axis split into
/// `sw` phases, so a stride-sw tap reads a contiguous run of one phase row.
template <class T>
struct PaddedInput {
  std::vector<T> buf;
  std::size_t c = 0, tp = 0, hp = 0, sw = 1, wq = 0;

  const T* row(std::size_t n, std::size_t ch, std::size_t t, std::size_t h,
               std::size_t phase) const {
    return buf.data() + ((((n * c + ch) * tp + t) * hp + h) * sw + phase) * wq;
  }
};

template <class T>
PaddedInput<T> pad_input(const T* x, const Shape& s, const Triple& pad,
                         std::size_t sw, std::size_t min_wq) {
  PaddedInput<T> p;
  const std::size_t n = s[0], ti = s[2], hi = s[3], wi = s[4];
  p.c = s[1];
  p.tp = ti + 2 * pad.t;
  p.hp = hi + 2 * pad.h;
  p.sw = sw;
  p.wq = std::max((wi + 2 * pad.w + sw - 1) / sw, min_wq);
  p.buf.assign(n * p.c * p.tp * p.hp * sw * p.wq, T(0));
  for (std::size_t nc = 0; nc < n * p.c; ++nc)
    for (std::size_t t = 0; t < ti; ++t)
      for (std::size_t h = 0; h < hi; ++h) {
        const T* src = x + ((nc * ti + t) * hi + h) * wi;
        T* base = p.buf.data() + (((nc * p.tp + t + pad.t) * p.hp + h + pad.h) * sw) * p.wq;
        for (std::size_t j = 0; j < wi; ++j) {
          const std::size_t col = j + pad.w;
          base[(col % sw) * p.wq + col / sw] = src[j];
        }
      }
  return p;
}

inline std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

/// Calls f.template operator()<OB, WT>() with an output-channel block and a
/// row tile width suited to (co, wo).
template <class F>
void dispatch_tile(std::size_t co, std::size_t wo, F&& f) {
  auto pick_wt = [&]<std::size_t OB>() {
    constexpr std::size_t target = OB >= 8 ? 16 : 64 / OB < 16 ? 16 : (64 / OB > 64 ? 64 : 64 / OB);
    if constexpr (target >= 64) {
      if (wo > 32) return f.template operator()<OB, 64>();
    }
    if constexpr (target >= 32) {
      if (wo > 16) return f.template operator()<OB, 32>();
    }
    return f.template operator()<OB, 16>();
  };
  if (co >= 8) return pick_wt.template operator()<8>();
  if (co >= 4) return pick_wt.template operator()<4>();
  if (co >= 2) return pick_wt.template operator()<2>();
  return pick_wt.template operator()<1>();
}

/// Direct convolution over a padded input. Weights are packed as
/// [block][c][tap][OB]. Each tile holds OB output channels x WT columns;
/// the k^3 window terms of one input channel are summed in T and the
/// per-channel partials are accumulated in double.
template <class T, std::size_t OB, std::size_t WT>
void conv3d_forward_tiles(const PaddedInput<T>& P, const std::vector<T>& packed,
                          const T* bias, T* out, const ConvDims& d) {
  const std::size_t ksize = d.kt * d.kh * d.kw;
  const std::size_t nblk = (d.co + OB - 1) / OB;
  const std::size_t nwt = (d.wo + WT - 1) / WT;
  const std::size_t plane_out = d.to * d.ho * d.wo;
  const std::size_t st = d.g.stride.t, sh = d.g.stride.h, sw = P.sw;
  std::vector<std::size_t> eoff(d.kw);
  for (std::size_t e = 0; e < d.kw; ++e) eoff[e] = (e % sw) * P.wq + e / sw;

  for (std::size_t n = 0; n < d.n; ++n) {
    parallel_for(0, nblk * d.to, [&](std::size_t job) {
      const std::size_t blk = job / d.to, to = job % d.to;
      const std::size_t o0 = blk * OB;
      const std::size_t obn = std::min(OB, d.co - o0);
      const T* wb = packed.data() + blk * d.ci * ksize * OB;
      alignas(64) double acc[OB][WT];
      alignas(64) T part[OB][WT];
      for (std::size_t ho = 0; ho < d.ho; ++ho) {
        for (std::size_t wt = 0; wt < nwt; ++wt) {
          for (std::size_t ob = 0; ob < OB; ++ob)
            for (std::size_t i = 0; i < WT; ++i)
              acc[ob][i] = bias && ob < obn ? double(bias[o0 + ob]) : 0.0;
          for (std::size_t c = 0; c < d.ci; ++c) {
            for (std::size_t ob = 0; ob < OB; ++ob)
              for (std::size_t i = 0; i < WT; ++i) part[ob][i] = T(0);
            const T* wv = wb + c * ksize * OB;
            for (std::size_t a = 0; a < d.kt; ++a) {
              for (std::size_t b = 0; b < d.kh; ++b) {
                const T* r = P.row(n, c, to * st + a, ho * sh + b, 0) + wt * WT;
                for (std::size_t e = 0; e < d.kw; ++e, wv += OB) {
                  const T* __restrict src = r + eoff[e];
#pragma GCC unroll 8
                  for (std::size_t ob = 0; ob < OB; ++ob) {
                    const T w = wv[ob];
#pragma omp simd
                    for (std::size_t i = 0; i < WT; ++i) part[ob][i] += w * src[i];
                  }
                }
              }
            }
            for (std::size_t ob = 0; ob < OB; ++ob)
              for (std::size_t i = 0; i < WT; ++i) acc[ob][i] += double(part[ob][i]);
          }
          const std::size_t len = std::min(WT, d.wo - wt * WT);
          for (std::size_t ob = 0; ob < obn; ++ob) {
            T* dst = out + (n * d.co + o0 + ob) * plane_out + (to * d.ho + ho) * d.wo + wt * WT;
            for (std::size_t i = 0; i < len; ++i) dst[i] = static_cast<T>(acc[ob][i]);
          }
        }
      }
    });
  }
}

/// Packs weight(o, c, tap) into [block][c][tap][ob]; `flip` swaps the
/// roles of C_out/C_in and mirrors the taps (transposed convolution).
template <class T>
std::vector<T> pack_weights(const Tensor<T>& w, std::size_t ob_size, bool flip) {
  const auto& s = w.shape();
  const std::size_t co = flip ? s[1] : s[0], ci = flip ? s[0] : s[1];
  const std::size_t kt = s[2], kh = s[3], kw = s[4];
  const std::size_t ksize = kt * kh * kw;
  const std::size_t nblk = (co + ob_size - 1) / ob_size;
  std::vector<T> packed(nblk * ci * ksize * ob_size, T(0));
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t k = 0; k < ksize; ++k) {
        const T v = flip ? w[(c * co + o) * ksize + (ksize - 1 - k)]
                         : w[(o * ci + c) * ksize + k];
        packed[(((o / ob_size) * ci + c) * ksize + k) * ob_size + o % ob_size] = v;
      }
  return packed;
}

/// Convolution of `input` (described by d) with `weight`, or with its
/// mirrored transpose when `flip` is set.
template <class T>
void conv3d_forward_kernel(const T* input, const Tensor<T>& weight, bool flip,
                           const std::type_identity_t<T>* bias, T* out,
                           const ConvDims& d) {
  dispatch_tile(d.co, d.wo, [&]<std::size_t OB, std::size_t WT>() {
    const std::size_t sw = d.g.stride.w;
    const auto P = pad_input(input, Shape{d.n, d.ci, d.ti, d.hi, d.wi}, d.g.padding,
                             sw, round_up(d.wo, WT) + (d.kw - 1) / sw);
    conv3d_forward_tiles<T, OB, WT>(P, pack_weights(weight, OB, flip), bias, out, d);
  });
}

}  // namespace detail

/// Direct 3D convolution with zero padding; out-of-range reads contribute 0.
template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight,
                 const std::type_identity_t<Tensor<T>>* bias,
                 const ConvGeometry& g) {
  const auto d = detail::conv_dims(input.shape(), weight.shape(), g);
  if (bias)
    require(bias->numel() == d.co, Errc::shape_mismatch,
            "conv3d bias extent does not match C_out");
  Tensor<T> out({d.n, d.co, d.to, d.ho, d.wo});
  detail::conv3d_forward_kernel(input.ptr(), weight, false,
                                bias ? bias->ptr() : nullptr, out.ptr(), d);
  return out;
}

template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const ConvParams<T>& p) {
  return conv3d(input, p.weight, p.bias ? &*p.bias : nullptr, p.geometry());
}

/// d(loss)/d(input) for conv3d given d(loss)/d(output).
template <class T>
Tensor<T> conv3d_backward_input(const Tensor<T>& grad_out,
                                const Tensor<T>& weight,
                                const Shape& input_shape,
                                const ConvGeometry& g) {
  const auto d = detail::conv_dims(input_shape, weight.shape(), g);
  require(grad_out.shape() == Shape({d.n, d.co, d.to, d.ho, d.wo}),
          Errc::shape_mismatch, "conv3d grad_out shape mismatch");
  Tensor<T> gin(input_shape);
  const bool unit_stride = g.stride == Triple{1, 1, 1};
  if (unit_stride && g.padding.t < d.kt && g.padding.h < d.kh &&
      g.padding.w < d.kw) {
    // stride 1: correlation of grad_out with the mirrored, transposed kernel
    const ConvGeometry tg{{1, 1, 1},
                          {d.kt - 1 - g.padding.t, d.kh - 1 - g.padding.h,
                           d.kw - 1 - g.padding.w}};
    const Shape tw{d.ci, d.co, d.kt, d.kh, d.kw};
    const auto td = detail::conv_dims(grad_out.shape(), tw, tg);
    detail::conv3d_forward_kernel(grad_out.ptr(), weight, true, nullptr,
                                  gin.ptr(), td);
    return gin;
  }
  // Strided: split the input positions i = s*q + r - p into phases r. Each
  // phase only sees taps k = r + s*j, so it is a stride-1 correlation of
  // grad_out with a decimated, mirrored kernel.
  const Triple s{g.stride.t, g.stride.h, g.stride.w};
  const Triple p = g.padding;
  const Triple k{d.kt, d.kh, d.kw};
  const Triple in{d.ti, d.hi, d.wi};
  const Triple out{d.to, d.ho, d.wo};
  auto axis = [](const Triple& v, int ax) {
    return ax == 0 ? v.t : ax == 1 ? v.h : v.w;
  };
  for (std::size_t rt = 0; rt < s.t; ++rt)
    for (std::size_t rh = 0; rh < s.h; ++rh)
      for (std::size_t rw = 0; rw < s.w; ++rw) {
        const std::size_t r[3] = {rt, rh, rw};
        std::size_t J[3], q_lo[3], Q[3], E[3];
        std::ptrdiff_t off[3];
        bool empty = false;
        for (int ax = 0; ax < 3; ++ax) {
          const std::size_t sa = axis(s, ax), pa = axis(p, ax), ka = axis(k, ax);
          J[ax] = r[ax] < ka ? (ka - r[ax] + sa - 1) / sa : 0;
          // q with 0 <= s*q + r - p < in
          q_lo[ax] = pa > r[ax] ? (pa - r[ax] + sa - 1) / sa : 0;
          const std::size_t lim = axis(in, ax) + pa;
          const std::size_t q_hi = lim > r[ax] ? (lim - r[ax] - 1) / sa + 1 : 0;
          Q[ax] = q_hi > q_lo[ax] ? q_hi - q_lo[ax] : 0;
          if (J[ax] == 0 || Q[ax] == 0) empty = true;
          E[ax] = Q[ax] + J[ax] - 1;
          off[ax] = std::ptrdiff_t(q_lo[ax]) - std::ptrdiff_t(J[ax]) + 1;
        }
        if (empty) continue;  // no tap reaches these positions: gradient 0
        // window of grad_out: G[x] = go[x + off], zero outside
        Tensor<T> G({d.n, d.co, E[0], E[1], E[2]});
        for (std::size_t no = 0; no < d.n * d.co; ++no)
          for (std::size_t x0 = 0; x0 < E[0]; ++x0) {
            const std::ptrdiff_t t = std::ptrdiff_t(x0) + off[0];
            if (t < 0 || t >= std::ptrdiff_t(out.t)) continue;
            for (std::size_t x1 = 0; x1 < E[1]; ++x1) {
              const std::ptrdiff_t h = std::ptrdiff_t(x1) + off[1];
              if (h < 0 || h >= std::ptrdiff_t(out.h)) continue;
              const T* src = grad_out.ptr() + ((no * out.t + t) * out.h + h) * out.w;
              T* dst = G.ptr() + ((no * E[0] + x0) * E[1] + x1) * E[2];
              for (std::size_t x2 = 0; x2 < E[2]; ++x2) {
                const std::ptrdiff_t w = std::ptrdiff_t(x2) + off[2];
                if (w >= 0 && w < std::ptrdiff_t(out.w)) dst[x2] = src[w];
              }
            }
          }
        Tensor<T> Wr({d.co, d.ci, J[0], J[1], J[2]});
        for (std::size_t oc = 0; oc < d.co * d.ci; ++oc)
          for (std::size_t j0 = 0; j0 < J[0]; ++j0)
            for (std::size_t j1 = 0; j1 < J[1]; ++j1)
              for (std::size_t j2 = 0; j2 < J[2]; ++j2)
                Wr[((oc * J[0] + j0) * J[1] + j1) * J[2] + j2] =
                    weight[((oc * d.kt + r[0] + s.t * j0) * d.kh + r[1] + s.h * j1) * d.kw +
                           r[2] + s.w * j2];
        const auto td = detail::conv_dims(G.shape(), Shape{d.ci, d.co, J[0], J[1], J[2]},
                                          ConvGeometry{});
        Tensor<T> part({d.n, d.ci, Q[0], Q[1], Q[2]});
        detail::conv3d_forward_kernel(G.ptr(), Wr, true, nullptr, part.ptr(), td);
        for (std::size_t nc = 0; nc < d.n * d.ci; ++nc)
          for (std::size_t a0 = 0; a0 < Q[0]; ++a0)
            for (std::size_t a1 = 0; a1 < Q[1]; ++a1) {
              const std::size_t ti = s.t * (q_lo[0] + a0) + r[0] - p.t;
              const std::size_t hi = s.h * (q_lo[1] + a1) + r[1] - p.h;
              const T* src = part.ptr() + ((nc * Q[0] + a0) * Q[1] + a1) * Q[2];
              T* dst = gin.ptr() + ((nc * d.ti + ti) * d.hi + hi) * d.wi;
              for (std::size_t a2 = 0; a2 < Q[2]; ++a2)
                dst[s.w * (q_lo[2] + a2) + r[2] - p.w] = src[a2];
            }
      }
  return gin;
}

namespace detail {

/// Weight gradient over a padded input and a grad_out copy whose rows are
/// zero-extended to a multiple of WT. Products are gathered in T lanes over
/// one output time slice and flushed into double sums.
template <class T, std::size_t OB, std::size_t WT>
void conv3d_weight_tiles(const PaddedInput<T>& P, const std::vector<T>& gop,
                         std::vector<double>& acc, const ConvDims& d) {
  const std::size_t ksize = d.kt * d.kh * d.kw;
  const std::size_t nblk = (d.co + OB - 1) / OB;
  const std::size_t wor = round_up(d.wo, WT);
  const std::size_t co_pad = nblk * OB;
  const std::size_t st = d.g.stride.t, sh = d.g.stride.h, sw = P.sw;
  std::vector<std::size_t> eoff(d.kw);
  for (std::size_t e = 0; e < d.kw; ++e) eoff[e] = (e % sw) * P.wq + e / sw;

  parallel_for(0, nblk, [&](std::size_t blk) {
    alignas(64) T lanes[OB][WT];
    for (std::size_t n = 0; n < d.n; ++n) {
      for (std::size_t to = 0; to < d.to; ++to) {
        const T* g0 = gop.data() + ((n * co_pad + blk * OB) * d.to + to) * d.ho * wor;
        const std::size_t gstride = d.to * d.ho * wor;
        for (std::size_t c = 0; c < d.ci; ++c) {
          for (std::size_t a = 0; a < d.kt; ++a) {
            for (std::size_t b = 0; b < d.kh; ++b) {
              for (std::size_t e = 0; e < d.kw; ++e) {
                for (std::size_t ob = 0; ob < OB; ++ob)
                  for (std::size_t i = 0; i < WT; ++i) lanes[ob][i] = T(0);
                for (std::size_t ho = 0; ho < d.ho; ++ho) {
                  const T* r = P.row(n, c, to * st + a, ho * sh + b, 0) + eoff[e];
                  const T* gr = g0 + ho * wor;
                  for (std::size_t w0 = 0; w0 < wor; w0 += WT) {
                    const T* __restrict src = r + w0;
#pragma GCC unroll 8
                    for (std::size_t ob = 0; ob < OB; ++ob) {
                      const T* __restrict gg = gr + ob * gstride + w0;
#pragma omp simd
                      for (std::size_t i = 0; i < WT; ++i) lanes[ob][i] += gg[i] * src[i];
                    }
                  }
                }
                const std::size_t tap = (a * d.kh + b) * d.kw + e;
                for (std::size_t ob = 0; ob < OB; ++ob) {
                  double sum = 0;
                  for (std::size_t i = 0; i < WT; ++i) sum += lanes[ob][i];
                  acc[((blk * OB + ob) * d.ci + c) * ksize + tap] += sum;
                }
              }
            }
          }
        }
      }
    }
  });
}

}  // namespace detail

/// d(loss)/d(weight) for conv3d.
template <class T>
Tensor<T> conv3d_backward_weight(const Tensor<T>& grad_out,
                                 const Tensor<T>& input,
                                 const Shape& weight_shape,
                                 const ConvGeometry& g) {
  const auto d = detail::conv_dims(input.shape(), weight_shape, g);
  require(grad_out.shape() == Shape({d.n, d.co, d.to, d.ho, d.wo}),
          Errc::shape_mismatch, "conv3d grad_out shape mismatch");
  const std::size_t ksize = d.kt * d.kh * d.kw;
  Tensor<T> gw(weight_shape);
  detail::dispatch_tile(d.co, d.wo, [&]<std::size_t OB, std::size_t WT>() {
    const std::size_t sw = g.stride.w;
    const std::size_t wor = detail::round_up(d.wo, WT);
    const std::size_t co_pad = detail::round_up(d.co, OB);
    const auto P = detail::pad_input(input.ptr(), input.shape(), g.padding, sw,
                                     wor + (d.kw - 1) / sw);
    std::vector<T> gop(d.n * co_pad * d.to * d.ho * wor, T(0));
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t o = 0; o < d.co; ++o)
        for (std::size_t r = 0; r < d.to * d.ho; ++r)
          std::copy_n(grad_out.ptr() + ((n * d.co + o) * d.to * d.ho + r) * d.wo, d.wo,
                      gop.data() + ((n * co_pad + o) * d.to * d.ho + r) * wor);
    std::vector<double> acc(co_pad * d.ci * ksize, 0.0);
    detail::conv3d_weight_tiles<T, OB, WT>(P, gop, acc, d);
    for (std::size_t i = 0; i < gw.numel(); ++i) gw[i] = static_cast<T>(acc[i]);
  });
  return gw;
}

/// Sum of grad_out over every axis except the channel axis (axis 1).
template <class T>
Tensor<T> channel_sum(const Tensor<T>& x) {
  require(x.rank() >= 2, Errc::shape_mismatch, "channel_sum needs rank >= 2");
  const std::size_t n = x.extent(0), c = x.extent(1);
  const std::size_t inner = x.numel() / (n * c);
  Tensor<T> out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = x.ptr() + (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) s += p[i];
    }
    out[ch] = static_cast<T>(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

namespace detail {

inline std::vector<bool> axis_mask(std::size_t rank,
                                   const std::vector<std::size_t>& axes) {
  require(!axes.empty(), Errc::invalid_argument, "reduce: empty axis set");
  std::vector<bool> mask(rank, false);
  for (auto a : axes) {
    require(a < rank, Errc::out_of_range,
            "reduce: axis " + std::to_string(a) + " out of range for rank " +
                std::to_string(rank));
    mask[a] = true;
  }
  return mask;
}

/// Calls fn(in_offset, out_offset) over every input element in row-major
/// order, where out_offset addresses the element of `out_shape` obtained by
/// collapsing broadcast (extent 1) axes.
template <class Fn>
void for_each_mapped(const Shape& in_shape, const Shape& out_shape, Fn&& fn) {
  const std::size_t rank = in_shape.size();
  const Shape out_strides = row_major_strides(out_shape);
  Shape step(rank);
  for (std::size_t i = 0; i < rank; ++i)
    step[i] = out_shape[i] == 1 ? 0 : out_strides[i];
  const std::size_t inner = in_shape[rank - 1];
  const std::size_t inner_step = step[rank - 1];
  const std::size_t outer = shape_numel(in_shape) / inner;
  std::vector<std::size_t> idx(rank, 0);
  std::size_t out_base = 0;
  std::size_t in_off = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i)
      fn(in_off + i, out_base + i * inner_step);
    in_off += inner;
    // advance the multi-index over all but the innermost axis
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      if (++idx[ax] < in_shape[ax]) {
        out_base += step[ax];
        break;
      }
      out_base -= step[ax] * (in_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
}

}  // namespace detail

inline Shape reduced_shape(const Shape& s, const std::vector<std::size_t>& axes) {
  const auto mask = detail::axis_mask(s.size(), axes);
  Shape out = s;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (mask[i]) out[i] = 1;
  return out;
}

/// Reduction over `axes`; reduced axes keep extent 1.
template <class T>
Tensor<T> reduce(const Tensor<T>& input, const std::vector<std::size_t>& axes,
                 ReduceKind kind) {
  const Shape out_shape = reduced_shape(input.shape(), axes);
  const std::size_t count = input.numel() / shape_numel(out_shape);
  Tensor<T> out(out_shape);
  if (kind == ReduceKind::max) {
    std::vector<T> best(out.numel(), -std::numeric_limits<T>::infinity());
    std::vector<bool> seen(out.numel(), false);
    detail::for_each_mapped(input.shape(), out_shape,
                            [&](std::size_t i, std::size_t o) {
                              const T v = input[i];
                              if (!seen[o] || v > best[o]) {
                                best[o] = v;
                                seen[o] = true;
                              }
                            });
    std::copy(best.begin(), best.end(), out.data().begin());
    return out;
  }
  std::vector<double> acc(out.numel(), 0.0);
  detail::for_each_mapped(input.shape(), out_shape,
                          [&](std::size_t i, std::size_t o) { acc[o] += input[i]; });
  const double scale = kind == ReduceKind::mean ? 1.0 / double(count) : 1.0;
  for (std::size_t o = 0; o < acc.size(); ++o)
    out[o] = static_cast<T>(acc[o] * scale);
  return out;
}

/// Flat input offset of the first maximal element of each reduced group.
template <class T>
std::vector<std::size_t> reduce_argmax(const Tensor<T>& input,
                                       const std::vector<std::size_t>& axes) {
  const Shape out_shape = reduced_shape(input.shape(), axes);
  const std::size_t m = shape_numel(out_shape);
  std::vector<std::size_t> arg(m, 0);
  std::vector<bool> seen(m, false);
  detail::for_each_mapped(input.shape(), out_shape,
                          [&](std::size_t i, std::size_t o) {
                            if (!seen[o] || input[i] > input[arg[o]]) {
                              arg[o] = i;
                              seen[o] = true;
                            }
                          });
  return arg;
}

/// Double-precision sum of every element.
template <class T>
double sum_all(const Tensor<T>& x) {
  double s = 0;
  for (auto v : x.data()) s += v;
  return s;
}

// ---------------------------------------------------------------------------
// broadcasting elementwise

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  require(a.size() == b.size(), Errc::shape_mismatch,
          "broadcast requires equal rank: " + shape_str(a) + " vs " +
              shape_str(b));
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(a[i] == b[i] || a[i] == 1 || b[i] == 1, Errc::shape_mismatch,
            "incompatible broadcast extents: " + shape_str(a) + " vs " +
                shape_str(b));
    out[i] = std::max(a[i], b[i]);
  }
  return out;
}

namespace detail {

template <class T, class Op>
Tensor<T> broadcast_binary(const Tensor<T>& a, const Tensor<T>& b, Op op) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor<T> out(out_shape);
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = op(a[i], b[i]);
    return out;
  }
  const std::size_t rank = out_shape.size();
  const Shape as = row_major_strides(a.shape()), bs = row_major_strides(b.shape());
  Shape a_step(rank), b_step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    a_step[i] = a.extent(i) == 1 ? 0 : as[i];
    b_step[i] = b.extent(i) == 1 ? 0 : bs[i];
  }
  const std::size_t inner = out_shape[rank - 1];
  const std::size_t outer = out.numel() / inner;
  const std::size_t ai = a_step[rank - 1], bi = b_step[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ao = 0, bo = 0;
  T* dst = out.ptr();
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  for (std::size_t o = 0; o < outer; ++o, dst += inner) {
    if (ai == 1 && bi == 1)
      for (std::size_t i = 0; i < inner; ++i) dst[i] = op(pa[ao + i], pb[bo + i]);
    else if (ai == 1)
      for (std::size_t i = 0; i < inner; ++i) dst[i] = op(pa[ao + i], pb[bo]);
    else if (bi == 1)
      for (std::size_t i = 0; i < inner; ++i) dst[i] = op(pa[ao], pb[bo + i]);
    else
      for (std::size_t i = 0; i < inner; ++i) dst[i] = op(pa[ao], pb[bo]);
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        ao += a_step[ax];
        bo += b_step[ax];
        break;
      }
      ao -= a_step[ax] * (out_shape[ax] - 1);
      bo -= b_step[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> broadcast_mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary(a, b, [](T x, T y) { return x * y; });
}

template <class T>
Tensor<T> broadcast_add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary(a, b, [](T x, T y) { return x + y; });
}

/// Sums `x` down to `target` (the inverse of broadcasting).
template <class T>
Tensor<T> sum_to_shape(const Tensor<T>& x, const Shape& target) {
  if (x.shape() == target) return x;
  require(x.rank() == target.size(), Errc::shape_mismatch,
          "sum_to_shape rank mismatch");
  std::vector<std::size_t> axes;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] == x.extent(i)) continue;
    require(target[i] == 1, Errc::shape_mismatch, "sum_to_shape: bad target");
    axes.push_back(i);
  }
  return reduce(x, axes, ReduceKind::sum);
}

// ---------------------------------------------------------------------------
// batch normalization

template <class T>
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};

template <class T>
BatchStats<T> channel_stats(const Tensor<T>& x) {
  const std::size_t n = x.extent(0), c = x.extent(1);
  const std::size_t inner = x.numel() / (n * c);
  const double count = double(n * inner);
  BatchStats<T> st{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = x.ptr() + (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) s += p[i];
    }
    const double mu = s / count;
    double v = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = x.ptr() + (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double dlt = double(p[i]) - mu;
        v += dlt * dlt;
      }
    }
    st.mean[ch] = mu;
    st.var[ch] = v / count;
  }
  return st;
}

/// y = scale[c] * x + shift[c] over a channel-major tensor.
template <class T>
Tensor<T> channel_affine(const Tensor<T>& x, const std::vector<double>& scale,
                         const std::vector<double>& shift) {
  const std::size_t n = x.extent(0), c = x.extent(1);
  const std::size_t inner = x.numel() / (n * c);
  Tensor<T> y(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = x.ptr() + (b * c + ch) * inner;
      T* q = y.ptr() + (b * c + ch) * inner;
      const double s = scale[ch], t = shift[ch];
      for (std::size_t i = 0; i < inner; ++i)
        q[i] = static_cast<T>(s * double(p[i]) + t);
    }
  return y;
}

template <class T>
void check_bn(const Tensor<T>& x, const BatchNormParams<T>& p) {
  require(x.rank() >= 2, Errc::shape_mismatch, "batch_norm needs [N,C,...]");
  require(x.extent(1) == p.channels() && p.beta.numel() == p.channels() &&
              p.running_mean.numel() == p.channels() &&
              p.running_var.numel() == p.channels(),
          Errc::shape_mismatch,
          "batch_norm channel mismatch: input has " +
              std::to_string(x.extent(1)) + ", params have " +
              std::to_string(p.channels()));
}

/// Normalizes with batch statistics and updates the running statistics by
/// exponential moving average (the running variance uses the unbiased
/// estimate).
template <class T>
Tensor<T> batch_norm_train(const Tensor<T>& x, BatchNormParams<T>& p,
                           BatchStats<T>* stats_out = nullptr) {
  check_bn(x, p);
  const auto st = channel_stats(x);
  const std::size_t c = p.channels();
  const double count = double(x.numel() / c);
  std::vector<double> scale(c), shift(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(st.var[ch] + p.eps);
    scale[ch] = double(p.gamma[ch]) * inv;
    shift[ch] = double(p.beta[ch]) - st.mean[ch] * scale[ch];
    const double unbiased = count > 1 ? st.var[ch] * count / (count - 1) : st.var[ch];
    p.running_mean[ch] = static_cast<T>((1 - p.momentum) * p.running_mean[ch] +
                                        p.momentum * st.mean[ch]);
    p.running_var[ch] = static_cast<T>((1 - p.momentum) * p.running_var[ch] +
                                       p.momentum * unbiased);
  }
  if (stats_out) *stats_out = st;
  return channel_affine(x, scale, shift);
}

template <class T>
Tensor<T> batch_norm_infer(const Tensor<T>& x, const BatchNormParams<T>& p) {
  check_bn(x, p);
  const std::size_t c = p.channels();
  std::vector<double> scale(c), shift(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(double(p.running_var[ch]) + p.eps);
    scale[ch] = double(p.gamma[ch]) * inv;
    shift[ch] = double(p.beta[ch]) - double(p.running_mean[ch]) * scale[ch];
  }
  return channel_affine(x, scale, shift);
}

template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode) {
  return mode == Mode::train ? batch_norm_train(x, p) : batch_norm_infer(x, p);
}

// ---------------------------------------------------------------------------
// activations

template <class T>
T sigmoid_scalar(T v) {
  // symmetric form avoids overflow of exp for large |v|
  if (v >= 0) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <class T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> y(x.shape());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  } else {
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = sigmoid_scalar(x[i]);
  }
  return y;
}

// ---------------------------------------------------------------------------
// dense layer and loss

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  require(x.rank() == 2 && weight.rank() == 2, Errc::shape_mismatch,
          "linear expects [N,D] input and [K,D] weight");
  const std::size_t n = x.extent(0), dim = x.extent(1), k = weight.extent(0);
  require(weight.extent(1) == dim, Errc::shape_mismatch,
          "linear: input dim " + std::to_string(dim) + " vs weight dim " +
              std::to_string(weight.extent(1)));
  require(bias.numel() == k, Errc::shape_mismatch, "linear: bias extent");
  Tensor<T> out({n, k});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      double s = bias[j];
      const T* xr = x.ptr() + r * dim;
      const T* wr = weight.ptr() + j * dim;
      for (std::size_t i = 0; i < dim; ++i) s += double(xr[i]) * double(wr[i]);
      out[r * k + j] = static_cast<T>(s);
    }
  return out;
}

template <class T>
struct SoftmaxCE {
  double loss;
  Tensor<T> probs;
};

template <class T>
SoftmaxCE<T> softmax_cross_entropy(const Tensor<T>& logits,
                                   const std::vector<std::size_t>& labels) {
  require(logits.rank() == 2, Errc::shape_mismatch,
          "softmax_cross_entropy expects [N,K] logits");
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  require(labels.size() == n, Errc::shape_mismatch,
          "softmax_cross_entropy: label count does not match batch");
  Tensor<T> probs({n, k});
  double total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    require(labels[r] < k, Errc::out_of_range,
            "label " + std::to_string(labels[r]) + " out of range [0," +
                std::to_string(k) + ")");
    const T* z = logits.ptr() + r * k;
    double mx = z[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, double(z[j]));
    double denom = 0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(double(z[j]) - mx);
    for (std::size_t j = 0; j < k; ++j)
      probs[r * k + j] = static_cast<T>(std::exp(double(z[j]) - mx) / denom);
    total += -(double(z[labels[r]]) - mx - std::log(denom));
  }
  return {total / double(n), std::move(probs)};
}

// ---------------------------------------------------------------------------
// layout helpers

/// Concatenation along the channel axis of [N,C,...] tensors.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == b.rank() && a.rank() >= 2 && a.extent(0) == b.extent(0),
          Errc::shape_mismatch, "concat_channels: incompatible shapes");
  for (std::size_t i = 2; i < a.rank(); ++i)
    require(a.extent(i) == b.extent(i), Errc::shape_mismatch,
            "concat_channels: incompatible shapes");
  Shape s = a.shape();
  s[1] = a.extent(1) + b.extent(1);
  Tensor<T> out(s);
  const std::size_t n = a.extent(0);
  const std::size_t ca = a.numel() / n, cb = b.numel() / n;
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(a.ptr() + r * ca, ca, out.ptr() + r * (ca + cb));
    std::copy_n(b.ptr() + r * cb, cb, out.ptr() + r * (ca + cb) + ca);
  }
  return out;
}

/// Channel slice [begin, end) of a [N,C,...] tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require(begin < end && end <= x.extent(1), Errc::out_of_range,
          "slice_channels: bad range");
  Shape s = x.shape();
  s[1] = end - begin;
  Tensor<T> out(s);
  const std::size_t n = x.extent(0);
  const std::size_t inner = x.numel() / (n * x.extent(1));
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(x.ptr() + (r * x.extent(1) + begin) * inner,
                (end - begin) * inner, out.ptr() + r * s[1] * inner);
  return out;
}

/// Parameter-free shortcut: strided subsampling plus zero channel padding.
template <class T>
Tensor<T> subsample_pad(const Tensor<T>& x, std::size_t out_channels,
                        Triple stride) {
  require(x.rank() == 5 && out_channels >= x.extent(1), Errc::shape_mismatch,
          "subsample_pad: bad shapes");
  const std::size_t n = x.extent(0), c = x.extent(1);
  const std::size_t t = x.extent(2), h = x.extent(3), w = x.extent(4);
  const std::size_t to = (t - 1) / stride.t + 1, ho = (h - 1) / stride.h + 1,
                    wo = (w - 1) / stride.w + 1;
  Tensor<T> out({n, out_channels, to, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < to; ++i)
        for (std::size_t j = 0; j < ho; ++j)
          for (std::size_t k = 0; k < wo; ++k)
            out.at(b, ch, i, j, k) =
                x.at(b, ch, i * stride.t, j * stride.h, k * stride.w);
  return out;
}

template <class T>
Tensor<T> subsample_pad_backward(const Tensor<T>& g, const Shape& in_shape,
                                 Triple stride) {
  Tensor<T> out(in_shape);
  const std::size_t n = in_shape[0], c = in_shape[1];
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < g.extent(2); ++i)
        for (std::size_t j = 0; j < g.extent(3); ++j)
          for (std::size_t k = 0; k < g.extent(4); ++k)
            out.at(b, ch, i * stride.t, j * stride.h, k * stride.w) =
                g.at(b, ch, i, j, k);
  return out;
}

// ---------------------------------------------------------------------------
// small in-place helpers

template <class T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& x) {
  require(acc.shape() == x.shape(), Errc::shape_mismatch,
          "add_inplace: " + shape_str(acc.shape()) + " vs " +
              shape_str(x.shape()));
  for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += x[i];
}

template <class T>
Tensor<T> scaled(const Tensor<T>& x, T s) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v *= s;
  return y;
}

}  // namespace meranet

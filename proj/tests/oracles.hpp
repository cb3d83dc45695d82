#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Everything here is plain nested loops in double precision and
// shares no code with the library kernels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <type_traits>
#include <vector>

#include "meranet/tensor.hpp"

namespace oracle {

using meranet::Shape;
using meranet::Tensor;

/// Nested-loop 3D convolution with zero padding.
template <class T>
Tensor<double> conv3d(const Tensor<T>& x, const Tensor<T>& w,
                      const std::type_identity_t<Tensor<T>>* bias,
                      std::array<std::size_t, 3> stride, std::array<std::size_t, 3> pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const std::size_t n = xs[0], ci = xs[1], co = ws[0];
  std::array<std::size_t, 3> in{xs[2], xs[3], xs[4]}, k{ws[2], ws[3], ws[4]}, out{};
  for (int a = 0; a < 3; ++a) out[a] = (in[a] + 2 * pad[a] - k[a]) / stride[a] + 1;
  Tensor<double> y({n, co, out[0], out[1], out[2]});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t t = 0; t < out[0]; ++t)
        for (std::size_t h = 0; h < out[1]; ++h)
          for (std::size_t v = 0; v < out[2]; ++v) {
            double acc = bias ? double((*bias)[o]) : 0.0;
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t dt = 0; dt < k[0]; ++dt)
                for (std::size_t dh = 0; dh < k[1]; ++dh)
                  for (std::size_t dw = 0; dw < k[2]; ++dw) {
                    const long it = long(t * stride[0] + dt) - long(pad[0]);
                    const long ih = long(h * stride[1] + dh) - long(pad[1]);
                    const long iw = long(v * stride[2] + dw) - long(pad[2]);
                    if (it < 0 || ih < 0 || iw < 0 || it >= long(in[0]) || ih >= long(in[1]) ||
                        iw >= long(in[2]))
                      continue;
                    acc += double(x.at(b, c, std::size_t(it), std::size_t(ih), std::size_t(iw))) *
                           double(w.at(o, c, dt, dh, dw));
                  }
            y.at(b, o, t, h, v) = acc;
          }
  return y;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// sigma(conv_k([mean_c F ; max_c F]) + b), same padding.
template <class T>
Tensor<double> st_attention(const Tensor<T>& f, const Tensor<T>& w, double bias) {
  const auto& s = f.shape();
  Tensor<double> desc({s[0], 2, s[2], s[3], s[4]});
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t t = 0; t < s[2]; ++t)
      for (std::size_t h = 0; h < s[3]; ++h)
        for (std::size_t v = 0; v < s[4]; ++v) {
          double sum = 0, mx = -INFINITY;
          for (std::size_t c = 0; c < s[1]; ++c) {
            const double x = f.at(b, c, t, h, v);
            sum += x;
            mx = std::max(mx, x);
          }
          desc.at(b, 0, t, h, v) = sum / double(s[1]);
          desc.at(b, 1, t, h, v) = mx;
        }
  const std::size_t k = w.extent(2), p = k / 2;
  Tensor<double> wd(w.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) wd[i] = double(w[i]);
  auto y = conv3d<double>(desc, wd, nullptr, {1, 1, 1}, {p, p, p});
  for (auto& v : y.data()) v = sigmoid(v + bias);
  return y;
}

/// sigma(sum over {avg, max} of W2 relu(W1 d + b1) + b2), weights given as
/// dense row-major [out, in] arrays. Returns [N, C].
template <class T>
std::vector<std::vector<double>> channel_attention(const Tensor<T>& f,
                                                   const std::vector<double>& w1,
                                                   const std::vector<double>& b1,
                                                   const std::vector<double>& w2,
                                                   const std::vector<double>& b2) {
  const auto& s = f.shape();
  const std::size_t n = s[0], c = s[1], inner = s[2] * s[3] * s[4], hid = b1.size();
  std::vector<std::vector<double>> out(n, std::vector<double>(c, 0.0));
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<double> avg(c, 0.0), mx(c, -INFINITY);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) {
        const double x = f[(b * c + ch) * inner + i];
        avg[ch] += x / double(inner);
        mx[ch] = std::max(mx[ch], x);
      }
    for (const auto* d : {&avg, &mx}) {
      std::vector<double> h(hid);
      for (std::size_t j = 0; j < hid; ++j) {
        double a = b1[j];
        for (std::size_t i = 0; i < c; ++i) a += w1[j * c + i] * (*d)[i];
        h[j] = std::max(0.0, a);
      }
      for (std::size_t i = 0; i < c; ++i) {
        double a = b2[i];
        for (std::size_t j = 0; j < hid; ++j) a += w2[i * hid + j] * h[j];
        out[b][i] += a;
      }
    }
    for (auto& v : out[b]) v = sigmoid(v);
  }
  return out;
}

/// Attention overhead written out per block: squeeze C -> C/r and excite
/// C/r -> C with biases, then the 2-channel k^3 kernel with one bias.
inline std::size_t attention_overhead(const std::vector<std::size_t>& plan, std::size_t r,
                                      std::size_t k) {
  std::size_t total = 0;
  for (auto c : plan) {
    const std::size_t h = c < r ? 1 : c / r;
    const std::size_t squeeze = c * h + h;
    const std::size_t excite = h * c + c;
    const std::size_t spatial = 2 * k * k * k + 1;
    total += squeeze + excite + spatial;
  }
  return total;
}

/// max |a - b| / max(1, |b|) over all entries.
template <class A, class B>
double max_rel_error(const Tensor<A>& a, const Tensor<B>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = std::abs(double(a[i]) - double(b[i]));
    worst = std::max(worst, d / std::max(1.0, std::abs(double(b[i]))));
  }
  return worst;
}

}  // namespace oracle

#pragma once

#include <cmath>
#include <cstddef>

#include "meranet/error.hpp"
#include "meranet/random.hpp"
#include "meranet/tensor.hpp"

namespace meranet {

/// Half-width of the Xavier/Glorot uniform range.
inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  require(fan_in >= 1 && fan_out >= 1, Errc::invalid_argument,
          "xavier_init: fan_in and fan_out must be >= 1");
  return std::sqrt(6.0 / double(fan_in + fan_out));
}

/// Entries i.i.d. uniform on [-rv, rv], rv = sqrt(6 / (fan_in + fan_out)).
/// For a convolution, fan_in = C_in*kt*kh*kw and fan_out = C_out*kt*kh*kw.
template <class T>
Tensor<T> xavier_init(const Shape& shape, std::size_t fan_in,
                      std::size_t fan_out, Rng& rng) {
  const double rv = xavier_bound(fan_in, fan_out);
  Tensor<T> t(shape);
  for (auto& v : t.data()) {
    v = static_cast<T>(rng.uniform(-rv, rv));
    // rounding to T must not leave the interval
    if (double(v) > rv) v = std::nextafter(v, T(0));
    if (double(v) < -rv) v = std::nextafter(v, T(0));
  }
  return t;
}

/// Xavier initialization for a [C_out, C_in, ...kernel] or [K, D] weight.
template <class T>
Tensor<T> xavier_weight(const Shape& shape, Rng& rng) {
  require(shape.size() >= 2, Errc::invalid_argument,
          "xavier_weight: expected at least [out, in]");
  std::size_t receptive = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) receptive *= shape[i];
  return xavier_init<T>(shape, shape[1] * receptive, shape[0] * receptive, rng);
}

}  // namespace meranet

#pragma once

// Spatio-temporal and channel attention blocks over [N,C,T,H,W] feature
// volumes, in two forms: recorded on a Tape (ad::) for training, and as
// plain tensor functions for inference and testing.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "meranet/autodiff.hpp"
#include "meranet/init.hpp"
#include "meranet/ops.hpp"

namespace meranet {

enum class ChannelVariant { scnn, smlp };

inline std::string_view to_string(ChannelVariant v) {
  return v == ChannelVariant::scnn ? "scnn" : "smlp";
}

inline ChannelVariant parse_channel_variant(std::string_view s) {
  if (s == "scnn" || s == "SCNN") return ChannelVariant::scnn;
  if (s == "smlp" || s == "SMLP") return ChannelVariant::smlp;
  throw Error(Errc::invalid_argument,
              "unknown channel attention variant '" + std::string(s) +
                  "' (expected scnn or smlp)");
}

/// Cubic 2 -> 1 convolution with same padding, followed by a sigmoid.
template <class T>
struct STAttentionParams {
  ConvParams<T> conv;

  std::size_t kernel() const { return conv.weight.extent(2); }

  void validate() const {
    const auto& s = conv.weight.shape();
    require(s.size() == 5 && s[0] == 1 && s[1] == 2, Errc::invalid_argument,
            "spatio-temporal attention conv must be [1,2,k,k,k], got " +
                shape_str(s));
    require(s[2] == s[3] && s[3] == s[4] && s[2] % 2 == 1,
            Errc::invalid_argument,
            "spatio-temporal attention kernel must be cubic and odd");
    require(conv.stride == Triple{1, 1, 1} &&
                conv.padding == same_padding({s[2], s[3], s[4]}),
            Errc::invalid_argument,
            "spatio-temporal attention conv must use stride 1 and same padding");
    require(conv.bias && conv.bias->numel() == 1, Errc::invalid_argument,
            "spatio-temporal attention conv needs a scalar bias");
  }

  static STAttentionParams zeros(std::size_t k) {
    STAttentionParams p;
    p.conv.weight = Tensor<T>({1, 2, k, k, k});
    p.conv.bias = Tensor<T>({1});
    p.conv.padding = same_padding({k, k, k});
    p.validate();
    return p;
  }

  static STAttentionParams xavier(std::size_t k, Rng& rng) {
    auto p = zeros(k);
    p.conv.weight = xavier_weight<T>({1, 2, k, k, k}, rng);
    return p;
  }
};

/// Width of the shared squeeze layer. Channel counts below r clamp to 1.
inline std::size_t squeeze_extent(std::size_t channels, std::size_t r) {
  require(r >= 1, Errc::invalid_argument, "reduction ratio must be >= 1");
  if (channels < r) return 1;
  require(channels % r == 0, Errc::invalid_argument,
          "channel count " + std::to_string(channels) +
              " is not divisible by reduction ratio " + std::to_string(r));
  return channels / r;
}

/// Shared squeeze/excite sub-network. SCNN stores 1x1x1 convolution
/// kernels, SMLP stores dense matrices; the element order is identical.
template <class T>
struct ChannelAttentionParams {
  ChannelVariant variant = ChannelVariant::scnn;
  std::size_t reduction = 16;
  Tensor<T> squeeze_weight;  // [C/r, C] or [C/r, C, 1, 1, 1]
  Tensor<T> squeeze_bias;    // [C/r]
  Tensor<T> excite_weight;   // [C, C/r] or [C, C/r, 1, 1, 1]
  Tensor<T> excite_bias;     // [C]

  std::size_t channels() const { return excite_bias.numel(); }
  std::size_t hidden() const { return squeeze_bias.numel(); }

  static Shape weight_shape(ChannelVariant v, std::size_t out, std::size_t in) {
    return v == ChannelVariant::scnn ? Shape{out, in, 1, 1, 1} : Shape{out, in};
  }

  static ChannelAttentionParams zeros(std::size_t channels, std::size_t r,
                                      ChannelVariant v) {
    const std::size_t hid = squeeze_extent(channels, r);
    if (channels < r)
      diagnostic("channel attention: " + std::to_string(channels) +
                 " channels < reduction ratio " + std::to_string(r) +
                 "; squeeze width clamped to 1");
    ChannelAttentionParams p;
    p.variant = v;
    p.reduction = r;
    p.squeeze_weight = Tensor<T>(weight_shape(v, hid, channels));
    p.squeeze_bias = Tensor<T>({hid});
    p.excite_weight = Tensor<T>(weight_shape(v, channels, hid));
    p.excite_bias = Tensor<T>({channels});
    return p;
  }

  static ChannelAttentionParams xavier(std::size_t channels, std::size_t r,
                                       ChannelVariant v, Rng& rng) {
    auto p = zeros(channels, r, v);
    p.squeeze_weight = xavier_weight<T>(p.squeeze_weight.shape(), rng);
    p.excite_weight = xavier_weight<T>(p.excite_weight.shape(), rng);
    return p;
  }

  void validate(std::size_t c) const {
    require(channels() == c, Errc::shape_mismatch,
            "channel attention built for " + std::to_string(channels()) +
                " channels applied to " + std::to_string(c));
    require(hidden() == squeeze_extent(c, reduction), Errc::invalid_argument,
            "channel attention squeeze width inconsistent with C and r");
    require(squeeze_weight.shape() == weight_shape(variant, hidden(), c) &&
                excite_weight.shape() == weight_shape(variant, c, hidden()),
            Errc::invalid_argument,
            "channel attention weight shapes inconsistent with variant");
  }
};

namespace ad {

/// Parameter nodes of a spatio-temporal attention block bound to a tape.
template <class T>
struct STAttentionVars {
  Var<T> weight, bias;
};

template <class T>
struct ChannelAttentionVars {
  ChannelVariant variant;
  Var<T> squeeze_weight, squeeze_bias, excite_weight, excite_bias;
};

/// sigma(conv_k(concat(mean_c F, max_c F))) -> [N,1,T,H,W]
template <class T>
Var<T> st_attention_map(const Var<T>& f, const STAttentionVars<T>& p) {
  require(f.shape().size() == 5, Errc::shape_mismatch,
          "st_attention_map expects [N,C,T,H,W]");
  const auto k = p.weight.shape()[2];
  auto avg = reduce(f, {1}, ReduceKind::mean);
  auto mx = reduce(f, {1}, ReduceKind::max);
  auto desc = concat_channels(avg, mx);
  ConvGeometry g{{1, 1, 1}, same_padding({k, k, k})};
  return sigmoid(conv3d(desc, p.weight, p.bias, g));
}

template <class T>
Var<T> apply_spatiotemporal(const Var<T>& f, const Var<T>& a_st) {
  const auto& fs = f.shape();
  const auto& as = a_st.shape();
  require(as.size() == 5 && as[0] == fs[0] && as[1] == 1 && as[2] == fs[2] &&
              as[3] == fs[3] && as[4] == fs[4],
          Errc::shape_mismatch,
          "spatio-temporal map " + shape_str(as) + " does not match features " +
              shape_str(fs));
  return mul(f, a_st);
}

template <class T>
Var<T> shared_subnet(const Var<T>& desc, const ChannelAttentionVars<T>& p) {
  if (p.variant == ChannelVariant::scnn) {
    auto h = relu(conv3d(desc, p.squeeze_weight, p.squeeze_bias, ConvGeometry{}));
    return conv3d(h, p.excite_weight, p.excite_bias, ConvGeometry{});
  }
  const auto n = desc.shape()[0], c = desc.shape()[1];
  auto flat = reshape(desc, {n, c});
  auto h = relu(linear(flat, p.squeeze_weight, p.squeeze_bias));
  return reshape(linear(h, p.excite_weight, p.excite_bias), {n, c, 1, 1, 1});
}

/// sigma(W_e relu(W_s avg) + W_e relu(W_s max)) -> [N,C,1,1,1]
template <class T>
Var<T> channel_attention_map(const Var<T>& f, const ChannelAttentionVars<T>& p) {
  require(f.shape().size() == 5, Errc::shape_mismatch,
          "channel_attention_map expects [N,C,T,H,W]");
  auto avg = reduce(f, {2, 3, 4}, ReduceKind::mean);
  auto mx = reduce(f, {2, 3, 4}, ReduceKind::max);
  return sigmoid(add(shared_subnet(avg, p), shared_subnet(mx, p)));
}

template <class T>
Var<T> apply_channel(const Var<T>& f, const Var<T>& a_ch) {
  const auto& fs = f.shape();
  const auto& as = a_ch.shape();
  require(as.size() == 5 && as[0] == fs[0] && as[1] == fs[1] && as[2] == 1 &&
              as[3] == 1 && as[4] == 1,
          Errc::shape_mismatch,
          "channel map " + shape_str(as) + " does not match features " +
              shape_str(fs));
  return mul(f, a_ch);
}

template <class T>
STAttentionVars<T> bind(Tape<T>& tape, const STAttentionParams<T>& p,
                        const std::string& prefix = {}) {
  p.validate();
  return {tape.parameter(p.conv.weight, prefix + "conv/weight"),
          tape.parameter(*p.conv.bias, prefix + "conv/bias")};
}

template <class T>
ChannelAttentionVars<T> bind(Tape<T>& tape, const ChannelAttentionParams<T>& p,
                             const std::string& prefix = {}) {
  return {p.variant, tape.parameter(p.squeeze_weight, prefix + "squeeze/weight"),
          tape.parameter(p.squeeze_bias, prefix + "squeeze/bias"),
          tape.parameter(p.excite_weight, prefix + "excite/weight"),
          tape.parameter(p.excite_bias, prefix + "excite/bias")};
}

}  // namespace ad

// ---------------------------------------------------------------------------
// plain-tensor forms

template <class T>
Tensor<T> st_attention_map(const Tensor<T>& f, const STAttentionParams<T>& p) {
  Tape<T> tape;
  auto x = tape.input(f);
  return ad::st_attention_map(x, ad::bind(tape, p)).value();
}

template <class T>
Tensor<T> channel_attention_map(const Tensor<T>& f,
                                const ChannelAttentionParams<T>& p) {
  require(f.rank() == 5, Errc::shape_mismatch,
          "channel_attention_map expects [N,C,T,H,W]");
  p.validate(f.extent(1));
  Tape<T> tape;
  auto x = tape.input(f);
  return ad::channel_attention_map(x, ad::bind(tape, p)).value();
}

template <class T>
Tensor<T> apply_spatiotemporal(const Tensor<T>& f, const Tensor<T>& a_st) {
  Tape<T> tape;
  return ad::apply_spatiotemporal(tape.input(f), tape.input(a_st)).value();
}

template <class T>
Tensor<T> apply_channel(const Tensor<T>& f, const Tensor<T>& a_ch) {
  Tape<T> tape;
  return ad::apply_channel(tape.input(f), tape.input(a_ch)).value();
}

}  // namespace meranet

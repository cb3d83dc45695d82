#pragma once

// Residual attention blocks and the MERANet-18 / 3D-ResNet-18 networks:
// construction, forward pass, parameter auditing and symbolic shape
// propagation.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "meranet/attention.hpp"
#include "meranet/autodiff.hpp"
#include "meranet/init.hpp"
#include "meranet/ops.hpp"
#include "meranet/random.hpp"

namespace meranet {

enum class Variant { meranet18, resnet3d18 };
enum class ResidualProjection { conv, zero_pad };

inline std::string_view to_string(Variant v) {
  return v == Variant::meranet18 ? "meranet18" : "resnet3d18";
}
inline std::string_view to_string(ResidualProjection p) {
  return p == ResidualProjection::conv ? "conv" : "zero_pad";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "meranet18") return Variant::meranet18;
  if (s == "resnet3d18") return Variant::resnet3d18;
  throw Error(Errc::invalid_argument, "unknown variant '" + std::string(s) +
                                          "' (expected meranet18 or resnet3d18)");
}

inline ResidualProjection parse_projection(std::string_view s) {
  if (s == "conv") return ResidualProjection::conv;
  if (s == "zero_pad") return ResidualProjection::zero_pad;
  throw Error(Errc::invalid_argument, "unknown residual_projection '" +
                                          std::string(s) +
                                          "' (expected conv or zero_pad)");
}

inline const std::vector<std::size_t>& default_channel_plan() {
  static const std::vector<std::size_t> plan{64, 64, 128, 128, 256, 256, 512, 512};
  return plan;
}

struct ModelConfig {
  Variant variant = Variant::meranet18;
  std::size_t num_classes = 3;
  ChannelVariant ch_variant = ChannelVariant::scnn;
  std::size_t st_kernel = 5;
  std::size_t reduction = 16;
  std::vector<std::size_t> channel_plan = default_channel_plan();
  ResidualProjection residual_projection = ResidualProjection::conv;
  std::size_t in_channels = 3;
  std::uint64_t seed = 0;

  void validate() const {
    require(num_classes >= 2, Errc::invalid_argument, "num_classes must be >= 2");
    require(st_kernel == 3 || st_kernel == 5 || st_kernel == 7,
            Errc::invalid_argument, "st_kernel must be 3, 5 or 7");
    require(reduction >= 1, Errc::invalid_argument, "reduction ratio must be >= 1");
    require(!channel_plan.empty(), Errc::invalid_argument,
            "channel plan must not be empty");
    for (std::size_t i = 0; i < channel_plan.size(); ++i) {
      require(channel_plan[i] >= 1, Errc::invalid_argument,
              "channel plan entries must be >= 1");
      if (i > 0)
        require(channel_plan[i] >= channel_plan[i - 1], Errc::invalid_argument,
                "channel plan must be non-decreasing");
    }
    require(in_channels >= 1, Errc::invalid_argument, "in_channels must be >= 1");
  }
};

template <class T>
struct DownsampleParams {
  ConvParams<T> conv;  // 1x1x1, stride 2
  BatchNormParams<T> bn;
};

template <class T>
struct RABlockParams {
  std::string name;  // e.g. "block2_1"
  ConvParams<T> conv1, conv2;
  BatchNormParams<T> bn1, bn2;
  std::optional<ChannelAttentionParams<T>> ch_attn;
  std::optional<STAttentionParams<T>> st_attn;
  std::optional<DownsampleParams<T>> downsample;
  ResidualProjection projection = ResidualProjection::conv;

  std::size_t in_channels() const { return conv1.in_channels(); }
  std::size_t out_channels() const { return conv2.out_channels(); }
  bool changes_extent() const {
    return in_channels() != out_channels() || !(conv1.stride == Triple{1, 1, 1});
  }
};

template <class T>
struct ModelGraph {
  ModelConfig config;
  ConvParams<T> stem;  // 3x7x7, stride (1,2,2), padding (1,3,3)
  BatchNormParams<T> stem_bn;
  std::vector<RABlockParams<T>> blocks;
  Tensor<T> head_weight;  // [num_classes, C_last]
  Tensor<T> head_bias;    // [num_classes]
};

/// "block{stage}_{index}" names; a new stage starts whenever the channel
/// count changes.
inline std::vector<std::string> block_names(const std::vector<std::size_t>& plan) {
  std::vector<std::string> names;
  std::size_t stage = 0, index = 0;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    if (i == 0 || plan[i] != plan[i - 1]) {
      ++stage;
      index = 0;
    }
    ++index;
    names.push_back("block" + std::to_string(stage) + "_" + std::to_string(index));
  }
  return names;
}

// ---------------------------------------------------------------------------
// parameter traversal

enum class TensorRole { parameter, buffer };

/// Visits every tensor of the model in canonical order with its layer path.
/// Buffers (BN running statistics) are not trainable.
template <class M, class Fn>
void visit_tensors(M& m, Fn&& fn) {
  auto conv = [&](const std::string& path, auto& c) {
    fn(path + "/weight", c.weight, TensorRole::parameter);
    if (c.bias) fn(path + "/bias", *c.bias, TensorRole::parameter);
  };
  auto bn = [&](const std::string& path, auto& b) {
    fn(path + "/gamma", b.gamma, TensorRole::parameter);
    fn(path + "/beta", b.beta, TensorRole::parameter);
    fn(path + "/running_mean", b.running_mean, TensorRole::buffer);
    fn(path + "/running_var", b.running_var, TensorRole::buffer);
  };
  conv("stem/conv", m.stem);
  bn("stem/bn", m.stem_bn);
  for (auto& b : m.blocks) {
    conv(b.name + "/conv1", b.conv1);
    bn(b.name + "/bn1", b.bn1);
    conv(b.name + "/conv2", b.conv2);
    bn(b.name + "/bn2", b.bn2);
    if (b.ch_attn) {
      auto& ca = *b.ch_attn;
      fn(b.name + "/ch_attn/squeeze/weight", ca.squeeze_weight, TensorRole::parameter);
      fn(b.name + "/ch_attn/squeeze/bias", ca.squeeze_bias, TensorRole::parameter);
      fn(b.name + "/ch_attn/excite/weight", ca.excite_weight, TensorRole::parameter);
      fn(b.name + "/ch_attn/excite/bias", ca.excite_bias, TensorRole::parameter);
    }
    if (b.st_attn) conv(b.name + "/st_attn/conv", b.st_attn->conv);
    if (b.downsample) {
      conv(b.name + "/downsample/conv", b.downsample->conv);
      bn(b.name + "/downsample/bn", b.downsample->bn);
    }
  }
  fn(std::string("head/weight"), m.head_weight, TensorRole::parameter);
  fn(std::string("head/bias"), m.head_bias, TensorRole::parameter);
}

// ---------------------------------------------------------------------------
// construction

template <class T>
ConvParams<T> make_conv(std::size_t in, std::size_t out, Triple k, Triple stride,
                        Triple padding, bool bias) {
  ConvParams<T> c;
  c.weight = Tensor<T>({out, in, k.t, k.h, k.w});
  if (bias) c.bias = Tensor<T>({out});
  c.stride = stride;
  c.padding = padding;
  return c;
}

/// Builds a model with zero weights and identity batch normalization; the
/// structure only. Use build_model for an initialized network.
template <class T>
ModelGraph<T> build_structure(const ModelConfig& cfg) {
  cfg.validate();
  ModelGraph<T> m;
  m.config = cfg;
  const auto& plan = cfg.channel_plan;
  m.stem = make_conv<T>(cfg.in_channels, plan[0], {3, 7, 7}, {1, 2, 2}, {1, 3, 3},
                        false);
  m.stem_bn = BatchNormParams<T>::identity(plan[0]);
  const auto names = block_names(plan);
  std::size_t in = plan[0];
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const std::size_t out = plan[i];
    const bool down = i > 0 && out != in;
    RABlockParams<T> b;
    b.name = names[i];
    b.projection = cfg.residual_projection;
    const Triple stride = down ? Triple{2, 2, 2} : Triple{1, 1, 1};
    b.conv1 = make_conv<T>(in, out, {3, 3, 3}, stride, {1, 1, 1}, false);
    b.bn1 = BatchNormParams<T>::identity(out);
    b.conv2 = make_conv<T>(out, out, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, false);
    b.bn2 = BatchNormParams<T>::identity(out);
    if (cfg.variant == Variant::meranet18) {
      b.ch_attn = ChannelAttentionParams<T>::zeros(out, cfg.reduction, cfg.ch_variant);
      b.st_attn = STAttentionParams<T>::zeros(cfg.st_kernel);
    }
    if (down && cfg.residual_projection == ResidualProjection::conv) {
      b.downsample = DownsampleParams<T>{
          make_conv<T>(in, out, {1, 1, 1}, {2, 2, 2}, {0, 0, 0}, false),
          BatchNormParams<T>::identity(out)};
    }
    m.blocks.push_back(std::move(b));
    in = out;
  }
  m.head_weight = Tensor<T>({cfg.num_classes, in});
  m.head_bias = Tensor<T>({cfg.num_classes});
  return m;
}

/// Xavier-uniform weights, zero biases, BN gamma 1 / beta 0. Each tensor
/// draws from its own stream keyed by (seed, layer path), so layers shared
/// between variants receive identical values.
template <class T>
ModelGraph<T> build_model(const ModelConfig& cfg) {
  auto m = build_structure<T>(cfg);
  visit_tensors(m, [&](const std::string& path, Tensor<T>& t, TensorRole role) {
    if (role != TensorRole::parameter || t.rank() < 2) return;
    Rng rng(mix_seed(cfg.seed, path_hash(path)));
    t = xavier_weight<T>(t.shape(), rng);
  });
  return m;
}

// ---------------------------------------------------------------------------
// parameter audit

struct ParamCount {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> by_layer;
};

/// Trainable element count; BN running statistics are excluded.
template <class T>
ParamCount count_params(const ModelGraph<T>& m) {
  ParamCount pc;
  visit_tensors(m, [&](const std::string& path, const Tensor<T>& t, TensorRole role) {
    if (role != TensorRole::parameter) return;
    pc.total += t.numel();
    pc.by_layer.emplace_back(path, t.numel());
  });
  return pc;
}

// ---------------------------------------------------------------------------
// forward pass

struct ForwardOptions {
  // Replaces every attention map with ones (attention disabled).
  bool bypass_attention = false;
};

template <class T>
struct ForwardResult {
  Var<T> logits;
  std::map<std::string, Var<T>> taps;    // named feature volumes
  std::map<std::string, Var<T>> params;  // layer path -> parameter node
};

namespace detail {

template <class T>
class Binder {
 public:
  Binder(Tape<T>& tape, std::map<std::string, Var<T>>& out)
      : tape_(tape), out_(out) {}

  Var<T> operator()(const std::string& path, const Tensor<T>& value) {
    if (auto it = substitutes_.find(path); it != substitutes_.end()) {
      require(it->second.shape() == value.shape(), Errc::shape_mismatch,
              "substitute for " + path + " has the wrong shape");
      return it->second;
    }
    auto v = tape_.parameter(value, path);
    out_.emplace(path, v);
    return v;
  }

  // Routes `path` to an existing node instead of a fresh parameter
  // (gradient checks with respect to a single weight).
  void substitute(const std::string& path, const Var<T>& v) { substitutes_.insert_or_assign(path, v); }

  Tape<T>& tape() { return tape_; }

 private:
  Tape<T>& tape_;
  std::map<std::string, Var<T>>& out_;
  std::map<std::string, Var<T>> substitutes_;
};

template <class T>
void update_running(BatchNormParams<T>& p, const BatchStats<T>& st,
                    std::size_t count) {
  const double m = p.momentum;
  for (std::size_t c = 0; c < p.channels(); ++c) {
    const double unbiased =
        count > 1 ? st.var[c] * double(count) / double(count - 1) : st.var[c];
    p.running_mean[c] =
        static_cast<T>((1 - m) * double(p.running_mean[c]) + m * st.mean[c]);
    p.running_var[c] =
        static_cast<T>((1 - m) * double(p.running_var[c]) + m * unbiased);
  }
}

template <class T>
Var<T> conv(Binder<T>& bind, const std::string& path, const Var<T>& x,
            const ConvParams<T>& p) {
  auto w = bind(path + "/weight", p.weight);
  std::optional<Var<T>> b;
  if (p.bias) b = bind(path + "/bias", *p.bias);
  return ad::conv3d(x, w, b, p.geometry());
}

template <class T>
Var<T> bn(Binder<T>& bind, const std::string& path, const Var<T>& x,
          BatchNormParams<T>& p, Mode mode) {
  auto gamma = bind(path + "/gamma", p.gamma);
  auto beta = bind(path + "/beta", p.beta);
  if (mode == Mode::infer)
    return ad::batch_norm_infer(x, gamma, beta, p.running_mean, p.running_var,
                                p.eps);
  BatchStats<T> st;
  auto y = ad::batch_norm_train(x, gamma, beta, p.eps, &st);
  update_running(p, st, x.value().numel() / p.channels());
  return y;
}

}  // namespace detail

namespace ad {

/// O = relu(I_st + d(I)) with I_conv = BN(conv2(relu(BN(conv1(I))))),
/// I_ch = I_conv * A_ch(I_conv), I_st = I_ch * A_st(I_ch).
template <class T>
Var<T> ra_block(detail::Binder<T>& bind, const Var<T>& x, RABlockParams<T>& p,
                Mode mode, const ForwardOptions& opt = {},
                std::map<std::string, Var<T>>* taps = nullptr) {
  const auto& name = p.name;
  auto tap = [&](const char* stage, const Var<T>& v) {
    if (taps) taps->insert_or_assign(name + "/" + stage, v);
  };
  require(x.shape().size() == 5 && x.shape()[1] == p.in_channels(),
          Errc::shape_mismatch,
          name + ": input " + shape_str(x.shape()) + " incompatible with " +
              std::to_string(p.in_channels()) + " input channels");
  auto h = relu(detail::bn(bind, name + "/bn1",
                           detail::conv(bind, name + "/conv1", x, p.conv1), p.bn1,
                           mode));
  tap("conv1", h);
  auto i_conv = detail::bn(bind, name + "/bn2",
                           detail::conv(bind, name + "/conv2", h, p.conv2), p.bn2,
                           mode);
  tap("conv", i_conv);
  Var<T> i_st = i_conv;
  if (p.ch_attn && p.st_attn) {
    auto& tape = bind.tape();
    const auto& s = i_conv.shape();
    Var<T> a_ch, a_st;
    if (opt.bypass_attention) {
      a_ch = tape.input(Tensor<T>({s[0], s[1], 1, 1, 1}, T(1)));
    } else {
      p.ch_attn->validate(s[1]);
      ChannelAttentionVars<T> cv{
          p.ch_attn->variant,
          bind(name + "/ch_attn/squeeze/weight", p.ch_attn->squeeze_weight),
          bind(name + "/ch_attn/squeeze/bias", p.ch_attn->squeeze_bias),
          bind(name + "/ch_attn/excite/weight", p.ch_attn->excite_weight),
          bind(name + "/ch_attn/excite/bias", p.ch_attn->excite_bias)};
      a_ch = channel_attention_map(i_conv, cv);
    }
    auto i_ch = apply_channel(i_conv, a_ch);
    tap("ch", i_ch);
    if (opt.bypass_attention) {
      a_st = tape.input(Tensor<T>({s[0], 1, s[2], s[3], s[4]}, T(1)));
    } else {
      p.st_attn->validate();
      STAttentionVars<T> sv{bind(name + "/st_attn/conv/weight", p.st_attn->conv.weight),
                            bind(name + "/st_attn/conv/bias", *p.st_attn->conv.bias)};
      a_st = st_attention_map(i_ch, sv);
    }
    i_st = apply_spatiotemporal(i_ch, a_st);
    tap("st", i_st);
  }
  Var<T> shortcut = x;
  if (p.downsample) {
    shortcut = detail::bn(bind, name + "/downsample/bn",
                          detail::conv(bind, name + "/downsample/conv", x,
                                       p.downsample->conv),
                          p.downsample->bn, mode);
  } else if (p.changes_extent()) {
    require(p.projection == ResidualProjection::zero_pad, Errc::shape_mismatch,
            name + ": extents change but no downsample projection is present");
    shortcut = subsample_pad(x, p.out_channels(), p.conv1.stride);
  }
  require(shortcut.shape() == i_st.shape(), Errc::shape_mismatch,
          name + ": residual " + shape_str(shortcut.shape()) +
              " does not match main path " + shape_str(i_st.shape()));
  auto out = relu(add(i_st, shortcut));
  tap("out", out);
  return out;
}

}  // namespace ad

/// Full network on a tape. Training mode updates BN running statistics.
template <class T>
ForwardResult<T> forward(ModelGraph<T>& m, const Var<T>& x, Mode mode,
                         const ForwardOptions& opt = {}) {
  ForwardResult<T> r;
  detail::Binder<T> bind(*x.tape, r.params);
  const auto& xs = x.shape();
  require(xs.size() == 5 && xs[1] == m.config.in_channels, Errc::shape_mismatch,
          "forward expects [N," + std::to_string(m.config.in_channels) +
              ",T,H,W], got " + shape_str(xs));
  auto h = ad::relu(detail::bn(bind, "stem/bn",
                               detail::conv(bind, "stem/conv", x, m.stem),
                               m.stem_bn, mode));
  r.taps.emplace("stem/out", h);
  for (auto& b : m.blocks) h = ad::ra_block(bind, h, b, mode, opt, &r.taps);
  auto pooled = ad::reduce(h, {2, 3, 4}, ReduceKind::mean);
  r.taps.emplace("pool", pooled);
  const auto n = pooled.shape()[0], c = pooled.shape()[1];
  auto flat = ad::reshape(pooled, {n, c});
  r.logits = ad::linear(flat, bind("head/weight", m.head_weight),
                        bind("head/bias", m.head_bias));
  require(r.logits.value().all_finite(), Errc::non_finite,
          "forward produced non-finite logits (diverged)");
  return r;
}

template <class T>
Tensor<T> forward(ModelGraph<T>& m, const Tensor<T>& batch, Mode mode,
                  const ForwardOptions& opt = {}) {
  Tape<T> tape;
  return forward(m, tape.input(batch), mode, opt).logits.value();
}

template <class T>
Tensor<T> ra_block_forward(const Tensor<T>& input, RABlockParams<T>& p, Mode mode,
                           const ForwardOptions& opt = {}) {
  Tape<T> tape;
  std::map<std::string, Var<T>> params;
  detail::Binder<T> bind(tape, params);
  return ad::ra_block(bind, tape.input(input), p, mode, opt).value();
}

/// Shortcut path d(I): identity when `params` is absent, otherwise the
/// strided 1x1x1 projection followed by batch normalization.
template <class T>
Tensor<T> downsample(const Tensor<T>& input,
                     std::optional<DownsampleParams<T>>& params, Mode mode) {
  if (!params) return input;
  return batch_norm(conv3d(input, params->conv), params->bn, mode);
}

// ---------------------------------------------------------------------------
// symbolic shapes

struct ShapeRow {
  std::string layer;
  Shape extents;  // without the batch axis
};

/// Propagates [C,T,H,W] through the network without numeric execution.
template <class T>
std::vector<ShapeRow> shape_table(const ModelGraph<T>& m, const Shape& input) {
  require(input.size() == 4 && input[0] == m.config.in_channels,
          Errc::shape_mismatch,
          "shape_table expects [" + std::to_string(m.config.in_channels) +
              ",T,H,W], got " + shape_str(input));
  auto conv_shape = [](const Shape& in, const ConvParams<T>& c) {
    const auto k = c.kernel();
    return Shape{c.out_channels(), conv_out_extent(in[1], k.t, c.stride.t, c.padding.t),
                 conv_out_extent(in[2], k.h, c.stride.h, c.padding.h),
                 conv_out_extent(in[3], k.w, c.stride.w, c.padding.w)};
  };
  std::vector<ShapeRow> rows;
  Shape s = conv_shape(input, m.stem);
  rows.push_back({"stem", s});
  for (const auto& b : m.blocks) {
    require(s[0] == b.in_channels(), Errc::shape_mismatch,
            b.name + ": channel mismatch");
    const Shape main = conv_shape(conv_shape(s, b.conv1), b.conv2);
    Shape skip = s;
    if (b.downsample) {
      skip = conv_shape(s, b.downsample->conv);
    } else if (b.changes_extent()) {
      const auto st = b.conv1.stride;
      skip = {b.out_channels(), (s[1] - 1) / st.t + 1, (s[2] - 1) / st.h + 1,
              (s[3] - 1) / st.w + 1};
    }
    require(main == skip, Errc::shape_mismatch,
            b.name + ": residual extents " + shape_str(skip) +
                " do not match main path " + shape_str(main));
    s = main;
    rows.push_back({b.name, s});
  }
  rows.push_back({"pooling", {s[0], 1, 1, 1}});
  rows.push_back({"flatten", {s[0]}});
  rows.push_back({"dense", {m.config.num_classes}});
  return rows;
}

}  // namespace meranet

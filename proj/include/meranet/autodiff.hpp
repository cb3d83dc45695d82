#pragma once

// Reverse-mode automatic differentiation. A Tape records every operation
// as a node holding its output value, its input node ids and a backward
// rule; backward() walks the tape in reverse and accumulates gradients.

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "meranet/error.hpp"
#include "meranet/ops.hpp"
#include "meranet/tensor.hpp"

namespace meranet {

using NodeId = std::size_t;

enum class OpKind {
  input,
  parameter,
  conv3d,
  reduce_mean,
  reduce_max,
  reduce_sum,
  batch_norm,
  relu,
  sigmoid,
  linear,
  softmax_cross_entropy,
  mul,
  add,
  concat,
  reshape,
  pick,
  subsample_pad,
  custom,
};

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  NodeId id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

/// Gradient sink handed to backward rules.
template <class T>
class GradSink {
 public:
  GradSink(std::vector<std::optional<Tensor<T>>>& grads,
           const std::vector<bool>& wanted)
      : grads_(grads), wanted_(wanted) {}

  /// False for input leaves whose gradient nobody asked for.
  bool wants(NodeId id) const { return wanted_[id]; }

  void accumulate(NodeId id, Tensor<T> g) {
    if (!wanted_[id]) return;
    auto& slot = grads_[id];
    if (!slot) {
      slot = std::move(g);
    } else {
      add_inplace(*slot, g);
    }
  }

 private:
  std::vector<std::optional<Tensor<T>>>& grads_;
  const std::vector<bool>& wanted_;
};

template <class T>
using BackwardRule =
    std::function<void(const Tape<T>&, NodeId self, const Tensor<T>& grad_out,
                       GradSink<T>&)>;

/// Map from trainable parameter node to its gradient.
template <class T>
using GradientStore = std::map<NodeId, Tensor<T>>;

template <class T>
struct Gradients {
  GradientStore<T> params;
  std::map<NodeId, Tensor<T>> retained;

  /// Gradient of a retained node or parameter; zeros when unreached.
  Tensor<T> wrt(const Var<T>& v) const {
    if (auto it = params.find(v.id); it != params.end()) return it->second;
    if (auto it = retained.find(v.id); it != retained.end()) return it->second;
    return Tensor<T>(v.shape());
  }
};

template <class T>
class Tape {
 public:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    double scalar;  // full-precision value for single-element outputs
    BackwardRule<T> backward;
    std::string name;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> input(Tensor<T> value, std::string name = {}) {
    return push(OpKind::input, {}, std::move(value), {}, std::move(name));
  }

  Var<T> parameter(Tensor<T> value, std::string name = {}) {
    auto v = push(OpKind::parameter, {}, std::move(value), {}, std::move(name));
    params_.push_back(v.id);
    return v;
  }

  Var<T> record(OpKind kind, std::vector<NodeId> inputs, Tensor<T> value,
                BackwardRule<T> rule, std::optional<double> scalar = {}) {
    for (auto in : inputs)
      require(in < nodes_.size(), Errc::invalid_argument,
              "tape input references a node that does not exist yet");
    auto v = push(kind, std::move(inputs), std::move(value), std::move(rule));
    if (scalar) nodes_.back().scalar = *scalar;
    return v;
  }

  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<NodeId>& parameters() const { return params_; }

  /// Scalar value of a single-element node in double precision.
  double scalar(const Var<T>& v) const {
    const auto& n = nodes_.at(v.id);
    require(n.value.numel() == 1, Errc::non_scalar_root,
            "node " + std::to_string(v.id) + " is not a scalar");
    return n.scalar;
  }

 private:
  Var<T> push(OpKind kind, std::vector<NodeId> inputs, Tensor<T> value,
              BackwardRule<T> rule, std::string name = {}) {
    const double s = value.numel() == 1 ? double(value[0]) : 0.0;
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value), s,
                          std::move(rule), std::move(name)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<NodeId> params_;
};

/// Reverse sweep from a scalar root. Every trainable parameter receives an
/// entry (zeros when the root does not depend on it). Gradients of interior
/// nodes are released once propagated unless listed in `retain`.
template <class T>
Gradients<T> backward(const Tape<T>& tape, const Var<T>& root,
                      const std::vector<Var<T>>& retain = {}) {
  require(root.tape == &tape, Errc::invalid_argument,
          "backward: root belongs to a different tape");
  require(tape.value(root.id).numel() == 1, Errc::non_scalar_root,
          "backward: root is not a scalar (shape " +
              shape_str(tape.value(root.id).shape()) + ")");
  std::set<NodeId> keep;
  for (const auto& v : retain) keep.insert(v.id);

  std::vector<std::optional<Tensor<T>>> grads(root.id + 1);
  std::vector<bool> wanted(root.id + 1);
  for (NodeId i = 0; i <= root.id; ++i)
    wanted[i] = tape.node(i).kind != OpKind::input || keep.count(i) > 0;
  grads[root.id] = Tensor<T>(tape.value(root.id).shape(), T(1));
  GradSink<T> sink(grads, wanted);
  Gradients<T> out;

  for (NodeId i = root.id + 1; i-- > 0;) {
    if (!grads[i]) continue;
    const auto& node = tape.node(i);
    if (!node.inputs.empty()) {
      require(static_cast<bool>(node.backward), Errc::unregistered_op,
              "backward: node " + std::to_string(i) +
                  " has no registered backward rule");
      node.backward(tape, i, *grads[i], sink);
    }
    if (keep.count(i)) out.retained.emplace(i, *grads[i]);
    if (node.kind != OpKind::parameter) grads[i].reset();
  }
  for (auto p : tape.parameters()) {
    if (p < grads.size() && grads[p])
      out.params.emplace(p, std::move(*grads[p]));
    else
      out.params.emplace(p, Tensor<T>(tape.value(p).shape()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// differentiable operations

namespace ad {

template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, std::optional<Var<T>> b,
              const ConvGeometry& g) {
  auto& tape = *x.tape;
  Tensor<T> y = meranet::conv3d(x.value(), w.value(),
                                b ? &b->value() : nullptr, g);
  std::vector<NodeId> ins{x.id, w.id};
  if (b) ins.push_back(b->id);
  return tape.record(
      OpKind::conv3d, ins, std::move(y),
      [g](const Tape<T>& t, NodeId self, const Tensor<T>& go, GradSink<T>& s) {
        const auto& n = t.node(self);
        const auto& xv = t.value(n.inputs[0]);
        const auto& wv = t.value(n.inputs[1]);
        if (s.wants(n.inputs[0]))
          s.accumulate(n.inputs[0], conv3d_backward_input(go, wv, xv.shape(), g));
        s.accumulate(n.inputs[1], conv3d_backward_weight(go, xv, wv.shape(), g));
        if (n.inputs.size() == 3) s.accumulate(n.inputs[2], channel_sum(go));
      });
}

template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
              const ConvGeometry& g) {
  return conv3d(x, w, std::optional<Var<T>>(b), g);
}

template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const ConvGeometry& g) {
  return conv3d(x, w, std::optional<Var<T>>(), g);
}

template <class T>
Var<T> reduce(const Var<T>& x, const std::vector<std::size_t>& axes,
              ReduceKind kind) {
  auto& tape = *x.tape;
  Tensor<T> y = meranet::reduce(x.value(), axes, kind);
  std::optional<double> precise;
  if (y.numel() == 1 && kind != ReduceKind::max) {
    precise = sum_all(x.value());
    if (kind == ReduceKind::mean) *precise /= double(x.value().numel());
  }
  if (kind == ReduceKind::max) {
    auto arg = reduce_argmax(x.value(), axes);
    return tape.record(
        OpKind::reduce_max, {x.id}, std::move(y),
        [arg = std::move(arg)](const Tape<T>& t, NodeId self,
                               const Tensor<T>& go, GradSink<T>& s) {
          const auto in = t.node(self).inputs[0];
          Tensor<T> g(t.value(in).shape());
          for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += go[o];
          s.accumulate(in, std::move(g));
        },
        precise);
  }
  const OpKind k = kind == ReduceKind::mean ? OpKind::reduce_mean
                                            : OpKind::reduce_sum;
  return tape.record(
      k, {x.id}, std::move(y),
      [kind](const Tape<T>& t, NodeId self, const Tensor<T>& go,
             GradSink<T>& s) {
        const auto in = t.node(self).inputs[0];
        const auto& xs = t.value(in).shape();
        Tensor<T> g = broadcast_mul(Tensor<T>(xs, T(1)), go);
        if (kind == ReduceKind::mean) {
          const T scale = T(double(go.numel()) / double(shape_numel(xs)));
          for (auto& v : g.data()) v *= scale;
        }
        s.accumulate(in, std::move(g));
      },
      precise);
}

template <class T>
Var<T> mean_all(const Var<T>& x) {
  std::vector<std::size_t> axes(x.shape().size());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return reduce(x, axes, ReduceKind::mean);
}

template <class T>
Var<T> sum_all(const Var<T>& x) {
  std::vector<std::size_t> axes(x.shape().size());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return reduce(x, axes, ReduceKind::sum);
}

template <class T>
Var<T> activation(const Var<T>& x, Activation kind) {
  auto& tape = *x.tape;
  Tensor<T> y = meranet::activation(x.value(), kind);
  return tape.record(
      kind == Activation::relu ? OpKind::relu : OpKind::sigmoid, {x.id},
      std::move(y),
      [kind](const Tape<T>& t, NodeId self, const Tensor<T>& go,
             GradSink<T>& s) {
        const auto& n = t.node(self);
        const auto& xv = t.value(n.inputs[0]);
        Tensor<T> g(go.shape());
        if (kind == Activation::relu) {
          for (std::size_t i = 0; i < g.numel(); ++i)
            g[i] = xv[i] > T(0) ? go[i] : T(0);
        } else {
          for (std::size_t i = 0; i < g.numel(); ++i) {
            const T y = n.value[i];
            g[i] = go[i] * y * (T(1) - y);
          }
        }
        s.accumulate(n.inputs[0], std::move(g));
      });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return activation(x, Activation::relu);
}
template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return activation(x, Activation::sigmoid);
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& tape = *a.tape;
  Tensor<T> y = broadcast_mul(a.value(), b.value());
  return tape.record(
      OpKind::mul, {a.id, b.id}, std::move(y),
      [](const Tape<T>& t, NodeId self, const Tensor<T>& go, GradSink<T>& s) {
        const auto& n = t.node(self);
        const auto& av = t.value(n.inputs[0]);
        const auto& bv = t.value(n.inputs[1]);
        s.accumulate(n.inputs[0], sum_to_shape(broadcast_mul(go, bv), av.shape()));
        s.accumulate(n.inputs[1], sum_to_shape(broadcast_mul(go, av), bv.shape()));
      });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& tape = *a.tape;
  Tensor<T> y = broadcast_add(a.value(), b.value());
  return tape.record(
      OpKind::add, {a.id, b.id}, std::move(y),
      [](const Tape<T>& t, NodeId self, const Tensor<T>& go, GradSink<T>& s) {
        const auto& n = t.node(self);
        s.accumulate(n.inputs[0], sum_to_shape(go, t.value(n.inputs[0]).shape()));
        s.accumulate(n.inputs[1], sum_to_shape(go, t.value(n.inputs[1]).shape()));
      });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  auto& tape = *x.tape;
  Tensor<T> y = meranet::linear(x.value(), w.value(), b.value());
  return tape.record(
      OpKind::linear, {x.id, w.id, b.id}, std::move(y),
      [](const Tape<T>& t, NodeId self, const Tensor<T>& go, GradSink<T>& s) {
        const auto& n = t.node(self);
        const auto& xv = t.value(n.inputs[0]);
        const auto& wv = t.value(n.inputs[1]);
        const std::size_t rows = xv.extent(0), dim = xv.extent(1),
                          k = wv.extent(0);
        Tensor<T> gx(xv.shape()), gw(wv.shape()), gb({k});
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < dim; ++i) {
            double acc = 0;
            for (std::size_t j = 0; j < k; ++j)
              acc += double(go[r * k + j]) * double(wv[j * dim + i]);
            gx[r * dim + i] = static_cast<T>(acc);
          }
        for (std::size_t j = 0; j < k; ++j) {
          double bacc = 0;
          for (std::size_t r = 0; r < rows; ++r) bacc += go[r * k + j];
          gb[j] = static_cast<T>(bacc);
          for (std::size_t i = 0; i < dim; ++i) {
            double acc = 0;
            for (std::size_t r = 0; r < rows; ++r)
              acc += double(go[r * k + j]) * double(xv[r * dim + i]);
            gw[j * dim + i] = static_cast<T>(acc);
          }
        }
        s.accumulate(n.inputs[0], std::move(gx));
        s.accumulate(n.inputs[1], std::move(gw));
        s.accumulate(n.inputs[2], std::move(gb));
      });
}

template <class T>
struct LossOutput {
  Var<T> loss;
  Tensor<T> probs;
};

template <class T>
LossOutput<T> softmax_cross_entropy(const Var<T>& logits,
                                    std::vector<std::size_t> labels) {
  auto& tape = *logits.tape;
  auto res = meranet::softmax_cross_entropy(logits.value(), labels);
  Tensor<T> probs = res.probs;
  auto loss = tape.record(
      OpKind::softmax_cross_entropy, {logits.id},
      Tensor<T>::scalar(static_cast<T>(res.loss)),
      [probs, labels = std::move(labels)](const Tape<T>& t, NodeId self,
                                          const Tensor<T>& go, GradSink<T>& s) {
        const auto in = t.node(self).inputs[0];
        const std::size_t n = probs.extent(0), k = probs.extent(1);
        Tensor<T> g(probs.shape());
        const double scale = double(go[0]) / double(n);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < k; ++j) {
            const double target = j == labels[r] ? 1.0 : 0.0;
            g[r * k + j] = static_cast<T>((double(probs[r * k + j]) - target) * scale);
          }
        s.accumulate(in, std::move(g));
      },
      res.loss);
  return {loss, std::move(res.probs)};
}

/// Training-mode batch normalization differentiated through the batch
/// statistics. `stats_out` receives the batch mean/variance so the caller
/// can update running statistics.
template <class T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                        double eps, BatchStats<T>* stats_out = nullptr) {
  auto& tape = *x.tape;
  const auto& xv = x.value();
  require(xv.rank() >= 2 && gamma.value().numel() == xv.extent(1) &&
              beta.value().numel() == xv.extent(1),
          Errc::shape_mismatch, "batch_norm: channel mismatch");
  auto st = channel_stats(xv);
  const std::size_t c = xv.extent(1);
  std::vector<double> scale(c), shift(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    inv_std[ch] = 1.0 / std::sqrt(st.var[ch] + eps);
    scale[ch] = double(gamma.value()[ch]) * inv_std[ch];
    shift[ch] = double(beta.value()[ch]) - st.mean[ch] * scale[ch];
  }
  Tensor<T> y = channel_affine(xv, scale, shift);
  if (stats_out) *stats_out = st;
  return tape.record(
      OpKind::batch_norm, {x.id, gamma.id, beta.id}, std::move(y),
      [mean = st.mean, inv_std](const Tape<T>& t, NodeId self,
                                const Tensor<T>& go, GradSink<T>& s) {
        const auto& n = t.node(self);
        const auto& xv = t.value(n.inputs[0]);
        const auto& gv = t.value(n.inputs[1]);
        const std::size_t nb = xv.extent(0), c = xv.extent(1);
        const std::size_t inner = xv.numel() / (nb * c);
        const double m = double(nb * inner);
        Tensor<T> gx(xv.shape()), gg({c}), gbeta({c});
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t off = (b * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              const double xhat = (double(xv[off + i]) - mean[ch]) * inv_std[ch];
              sum_dy += go[off + i];
              sum_dy_xhat += double(go[off + i]) * xhat;
            }
          }
          gg[ch] = static_cast<T>(sum_dy_xhat);
          gbeta[ch] = static_cast<T>(sum_dy);
          const double k = double(gv[ch]) * inv_std[ch] / m;
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t off = (b * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              const double xhat = (double(xv[off + i]) - mean[ch]) * inv_std[ch];
              gx[off + i] = static_cast<T>(
                  k * (m * double(go[off + i]) - sum_dy - xhat * sum_dy_xhat));
            }
          }
        }
        s.accumulate(n.inputs[0], std::move(gx));
        s.accumulate(n.inputs[1], std::move(gg));
        s.accumulate(n.inputs[2], std::move(gbeta));
      });
}

/// Inference-mode batch normalization using fixed running statistics.
template <class T>
Var<T> batch_norm_infer(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                        const Tensor<T>& running_mean,
                        const Tensor<T>& running_var, double eps) {
  auto& tape = *x.tape;
  const auto& xv = x.value();
  const std::size_t c = xv.extent(1);
  require(gamma.value().numel() == c && beta.value().numel() == c &&
              running_mean.numel() == c && running_var.numel() == c,
          Errc::shape_mismatch, "batch_norm: channel mismatch");
  std::vector<double> mean(c), inv_std(c), scale(c), shift(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    mean[ch] = running_mean[ch];
    inv_std[ch] = 1.0 / std::sqrt(double(running_var[ch]) + eps);
    scale[ch] = double(gamma.value()[ch]) * inv_std[ch];
    shift[ch] = double(beta.value()[ch]) - mean[ch] * scale[ch];
  }
  Tensor<T> y = channel_affine(xv, scale, shift);
  return tape.record(
      OpKind::batch_norm, {x.id, gamma.id, beta.id}, std::move(y),
      [mean, inv_std](const Tape<T>& t, NodeId self, const Tensor<T>& go,
                      GradSink<T>& s) {
        const auto& n = t.node(self);
        const auto& xv = t.value(n.inputs[0]);
        const auto& gv = t.value(n.inputs[1]);
        const std::size_t nb = xv.extent(0), c = xv.extent(1);
        const std::size_t inner = xv.numel() / (nb * c);
        Tensor<T> gx(xv.shape()), gg({c}), gbeta({c});
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0, sum_dy_xhat = 0;
          const double k = double(gv[ch]) * inv_std[ch];
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t off = (b * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              const double xhat = (double(xv[off + i]) - mean[ch]) * inv_std[ch];
              sum_dy += go[off + i];
              sum_dy_xhat += double(go[off + i]) * xhat;
              gx[off + i] = static_cast<T>(k * double(go[off + i]));
            }
          }
          gg[ch] = static_cast<T>(sum_dy_xhat);
          gbeta[ch] = static_cast<T>(sum_dy);
        }
        s.accumulate(n.inputs[0], std::move(gx));
        s.accumulate(n.inputs[1], std::move(gg));
        s.accumulate(n.inputs[2], std::move(gbeta));
      });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  auto& tape = *a.tape;
  Tensor<T> y = meranet::concat_channels(a.value(), b.value());
  return tape.record(
      OpKind::concat, {a.id, b.id}, std::move(y),
      [](const Tape<T>& t, NodeId self, const Tensor<T>& go, GradSink<T>& s) {
        const auto& n = t.node(self);
        const std::size_t ca = t.value(n.inputs[0]).extent(1);
        s.accumulate(n.inputs[0], slice_channels(go, 0, ca));
        s.accumulate(n.inputs[1], slice_channels(go, ca, go.extent(1)));
      });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  auto& tape = *x.tape;
  Tensor<T> y = x.value().reshaped(std::move(shape));
  return tape.record(
      OpKind::reshape, {x.id}, std::move(y),
      [](const Tape<T>& t, NodeId self, const Tensor<T>& go, GradSink<T>& s) {
        const auto in = t.node(self).inputs[0];
        s.accumulate(in, go.reshaped(t.value(in).shape()));
      });
}

/// Single element of x at flat offset, as a scalar node.
template <class T>
Var<T> pick(const Var<T>& x, std::size_t flat_offset) {
  auto& tape = *x.tape;
  require(flat_offset < x.value().numel(), Errc::out_of_range,
          "pick: offset out of range");
  return tape.record(
      OpKind::pick, {x.id}, Tensor<T>::scalar(x.value()[flat_offset]),
      [flat_offset](const Tape<T>& t, NodeId self, const Tensor<T>& go,
                    GradSink<T>& s) {
        const auto in = t.node(self).inputs[0];
        Tensor<T> g(t.value(in).shape());
        g[flat_offset] = go[0];
        s.accumulate(in, std::move(g));
      });
}

template <class T>
Var<T> subsample_pad(const Var<T>& x, std::size_t out_channels, Triple stride) {
  auto& tape = *x.tape;
  Tensor<T> y = meranet::subsample_pad(x.value(), out_channels, stride);
  return tape.record(
      OpKind::subsample_pad, {x.id}, std::move(y),
      [stride](const Tape<T>& t, NodeId self, const Tensor<T>& go,
               GradSink<T>& s) {
        const auto in = t.node(self).inputs[0];
        s.accumulate(in, subsample_pad_backward(go, t.value(in).shape(), stride));
      });
}

}  // namespace ad
}  // namespace meranet

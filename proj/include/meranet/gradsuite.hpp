#pragma once

// Finite-difference checks of every differentiable op and of whole
// residual attention blocks, in double precision.

#include <cstdint>
#include <string>
#include <vector>

#include "meranet/attention.hpp"
#include "meranet/gradcheck.hpp"
#include "meranet/model.hpp"

namespace meranet {

struct GradSuiteRow {
  std::string group;  // "op" or "block"
  std::string name;
  GradCheckResult result;
};

inline constexpr double gradcheck_tolerance = 5e-3;

namespace detail {

inline Tensor<double> random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

// <y, R> for a fixed random R, so every output element carries a distinct weight.
inline Var<double> project(Tape<double>& tape, const Var<double>& y, std::uint64_t salt) {
  Rng rng(salt);
  auto r = tape.input(random_tensor(y.shape(), rng));
  return ad::sum_all(ad::mul(y, r));
}

}  // namespace detail

/// Runs the full suite. Large inputs are checked on a seeded subset of
/// `max_coords` coordinates.
inline std::vector<GradSuiteRow> gradient_suite(std::uint64_t seed = 0, double eps = 1e-6,
                                                std::size_t max_coords = 192) {
  using T = double;
  std::vector<GradSuiteRow> rows;
  Rng rng(mix_seed(seed, 0x5u));
  auto check = [&](const std::string& group, const std::string& name,
                   std::function<Var<T>(Tape<T>&, const Var<T>&)> g, const Tensor<T>& x) {
    const std::uint64_t salt = mix_seed(seed, path_hash(name));
    ScalarFn<T> f = [g, salt](Tape<T>& tape, const Var<T>& xv) {
      return detail::project(tape, g(tape, xv), salt);
    };
    rows.push_back({group, name,
                    finite_diff_check(f, x, GradCheckOptions{eps, max_coords, salt})});
  };
  auto rnd = [&](const Shape& s, double scale = 1.0) {
    return detail::random_tensor(s, rng, scale);
  };

  // convolution: input, weight and bias, unit and mixed strides
  {
    const auto x = rnd({2, 2, 4, 5, 5});
    const auto w = rnd({3, 2, 3, 3, 3}, 0.3);
    const auto b = rnd({3});
    for (const auto& [tag, g] :
         {std::pair<const char*, ConvGeometry>{"s1", ConvGeometry{{1, 1, 1}, {1, 1, 1}}},
          {"s122", ConvGeometry{{1, 2, 2}, {1, 1, 1}}},
          {"s2", ConvGeometry{{2, 2, 2}, {1, 0, 1}}}}) {
      const std::string n = std::string("conv3d/") + tag;
      check("op", n + "/input", [=](Tape<T>& t, const Var<T>& v) {
        return ad::conv3d(v, t.input(w), t.input(b), g);
      }, x);
      check("op", n + "/weight", [=](Tape<T>& t, const Var<T>& v) {
        return ad::conv3d(t.input(x), v, t.input(b), g);
      }, w);
      check("op", n + "/bias", [=](Tape<T>& t, const Var<T>& v) {
        return ad::conv3d(t.input(x), t.input(w), v, g);
      }, b);
    }
  }

  // reductions
  {
    const auto x = rnd({2, 3, 2, 3, 3});
    check("op", "reduce_mean/channel", [](Tape<T>&, const Var<T>& v) {
      return ad::reduce(v, {1}, ReduceKind::mean);
    }, x);
    check("op", "reduce_mean/thw", [](Tape<T>&, const Var<T>& v) {
      return ad::reduce(v, {2, 3, 4}, ReduceKind::mean);
    }, x);
    check("op", "reduce_max/channel", [](Tape<T>&, const Var<T>& v) {
      return ad::reduce(v, {1}, ReduceKind::max);
    }, x);
    check("op", "reduce_max/thw", [](Tape<T>&, const Var<T>& v) {
      return ad::reduce(v, {2, 3, 4}, ReduceKind::max);
    }, x);
    check("op", "reduce_sum/batch_t", [](Tape<T>&, const Var<T>& v) {
      return ad::reduce(v, {0, 2}, ReduceKind::sum);
    }, x);
  }

  // batch normalization
  {
    const auto x = rnd({3, 2, 2, 3, 3});
    const auto gamma = rnd({2}), beta = rnd({2});
    const Tensor<T> rm({2}, 0.1), rv({2}, 1.7);
    check("op", "batch_norm_train/input", [=](Tape<T>& t, const Var<T>& v) {
      return ad::batch_norm_train(v, t.input(gamma), t.input(beta), 1e-5);
    }, x);
    check("op", "batch_norm_train/gamma", [=](Tape<T>& t, const Var<T>& v) {
      return ad::batch_norm_train(t.input(x), v, t.input(beta), 1e-5);
    }, gamma);
    check("op", "batch_norm_train/beta", [=](Tape<T>& t, const Var<T>& v) {
      return ad::batch_norm_train(t.input(x), t.input(gamma), v, 1e-5);
    }, beta);
    check("op", "batch_norm_infer/input", [=](Tape<T>& t, const Var<T>& v) {
      return ad::batch_norm_infer(v, t.input(gamma), t.input(beta), rm, rv, 1e-5);
    }, x);
    check("op", "batch_norm_infer/gamma", [=](Tape<T>& t, const Var<T>& v) {
      return ad::batch_norm_infer(t.input(x), v, t.input(beta), rm, rv, 1e-5);
    }, gamma);
  }

  // pointwise, dense, loss
  {
    const auto x = rnd({2, 3, 2, 2, 2});
    check("op", "relu", [](Tape<T>&, const Var<T>& v) { return ad::relu(v); }, x);
    check("op", "sigmoid", [](Tape<T>&, const Var<T>& v) { return ad::sigmoid(v); }, x);
    const auto a = rnd({4, 5}), w = rnd({3, 5}), b = rnd({3});
    check("op", "linear/input", [=](Tape<T>& t, const Var<T>& v) {
      return ad::linear(v, t.input(w), t.input(b));
    }, a);
    check("op", "linear/weight", [=](Tape<T>& t, const Var<T>& v) {
      return ad::linear(t.input(a), v, t.input(b));
    }, w);
    check("op", "linear/bias", [=](Tape<T>& t, const Var<T>& v) {
      return ad::linear(t.input(a), t.input(w), v);
    }, b);
    check("op", "softmax_cross_entropy", [](Tape<T>&, const Var<T>& v) {
      return ad::softmax_cross_entropy(v, {0, 2, 1, 2}).loss;
    }, rnd({4, 3}, 2.0));
  }

  // broadcasting and layout
  {
    const auto f = rnd({2, 3, 2, 3, 3});
    const auto st = rnd({2, 1, 2, 3, 3}), ch = rnd({2, 3, 1, 1, 1});
    check("op", "mul/full", [=](Tape<T>& t, const Var<T>& v) { return ad::mul(v, t.input(st)); }, f);
    check("op", "mul/broadcast", [=](Tape<T>& t, const Var<T>& v) { return ad::mul(t.input(f), v); }, st);
    check("op", "add/full", [=](Tape<T>& t, const Var<T>& v) { return ad::add(v, t.input(ch)); }, f);
    check("op", "add/broadcast", [=](Tape<T>& t, const Var<T>& v) { return ad::add(t.input(f), v); }, ch);
    check("op", "concat/first", [=](Tape<T>& t, const Var<T>& v) {
      return ad::concat_channels(v, t.input(st));
    }, rnd({2, 2, 2, 3, 3}));
    check("op", "concat/second", [=](Tape<T>& t, const Var<T>& v) {
      return ad::concat_channels(t.input(st), v);
    }, rnd({2, 1, 2, 3, 3}));
    check("op", "reshape", [](Tape<T>&, const Var<T>& v) { return ad::reshape(v, {6, 18}); }, f);
    check("op", "pick", [](Tape<T>&, const Var<T>& v) { return ad::pick(v, 17); }, f);
    check("op", "subsample_pad", [](Tape<T>&, const Var<T>& v) {
      return ad::subsample_pad(v, 5, Triple{2, 2, 2});
    }, f);
  }

  // attention maps
  {
    const auto f = rnd({2, 4, 3, 4, 4});
    auto stp = STAttentionParams<T>::zeros(3);
    stp.conv.weight = rnd({1, 2, 3, 3, 3}, 0.3);
    stp.conv.bias = rnd({1});
    check("op", "st_attention/input", [=](Tape<T>& t, const Var<T>& v) {
      return ad::st_attention_map(v, ad::bind(t, stp));
    }, f);
    check("op", "st_attention/weight", [=](Tape<T>& t, const Var<T>& v) {
      return ad::st_attention_map(t.input(f), ad::STAttentionVars<T>{v, t.input(*stp.conv.bias)});
    }, stp.conv.weight);
    for (auto variant : {ChannelVariant::scnn, ChannelVariant::smlp}) {
      auto cp = ChannelAttentionParams<T>::zeros(4, 2, variant);
      cp.squeeze_weight = rnd(cp.squeeze_weight.shape(), 0.5);
      cp.squeeze_bias = rnd(cp.squeeze_bias.shape(), 0.5);
      cp.excite_weight = rnd(cp.excite_weight.shape(), 0.5);
      cp.excite_bias = rnd(cp.excite_bias.shape(), 0.5);
      const std::string n = "channel_attention/" + std::string(to_string(variant));
      check("op", n + "/input", [=](Tape<T>& t, const Var<T>& v) {
        return ad::channel_attention_map(v, ad::bind(t, cp));
      }, f);
      check("op", n + "/squeeze_weight", [=](Tape<T>& t, const Var<T>& v) {
        auto vars = ad::bind(t, cp);
        vars.squeeze_weight = v;
        return ad::channel_attention_map(t.input(f), vars);
      }, cp.squeeze_weight);
    }
  }

  // whole residual attention blocks in training mode
  {
    struct BlockCase {
      std::string name;
      ChannelVariant ch;
      std::vector<std::size_t> plan;
      std::size_t block;
    };
    const std::vector<BlockCase> cases{
        {"ra_block/identity/scnn", ChannelVariant::scnn, {8}, 0},
        {"ra_block/identity/smlp", ChannelVariant::smlp, {8}, 0},
        {"ra_block/downsample/scnn", ChannelVariant::scnn, {8, 16}, 1},
    };
    const auto x = rnd({2, 8, 4, 6, 6});
    for (const auto& bc : cases) {
      ModelConfig cfg;
      cfg.in_channels = 8;
      cfg.channel_plan = bc.plan;
      cfg.ch_variant = bc.ch;
      cfg.reduction = 4;
      cfg.st_kernel = 3;
      cfg.seed = seed;
      const auto block = build_model<T>(cfg).blocks[bc.block];
      auto run = [block](Tape<T>& t, const Var<T>& in, const std::string& sub,
                         const Var<T>* param) {
        auto p = block;  // training mode updates running statistics
        std::map<std::string, Var<T>> bound;
        detail::Binder<T> bind(t, bound);
        if (param) bind.substitute(block.name + "/" + sub, *param);
        return ad::ra_block(bind, in, p, Mode::train);
      };
      check("block", bc.name + "/input", [=](Tape<T>& t, const Var<T>& v) {
        return run(t, v, "", nullptr);
      }, x);
      for (const auto& [sub, value] :
           {std::pair<std::string, Tensor<T>>{"conv1/weight", block.conv1.weight},
            {"ch_attn/squeeze/weight", block.ch_attn->squeeze_weight},
            {"st_attn/conv/weight", block.st_attn->conv.weight}}) {
        check("block", bc.name + "/" + sub, [=, sub = sub](Tape<T>& t, const Var<T>& v) {
          return run(t, t.input(x), sub, &v);
        }, value);
      }
    }
  }
  return rows;
}

}  // namespace meranet

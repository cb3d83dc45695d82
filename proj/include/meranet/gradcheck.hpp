#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "meranet/autodiff.hpp"
#include "meranet/random.hpp"

namespace meranet {

template <class T>
using ScalarFn = std::function<Var<T>(Tape<T>&, const Var<T>&)>;

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double analytic = 0;  // at worst_index
  double numeric = 0;   // at worst_index
  std::size_t checked = 0;
};

struct GradCheckOptions {
  double eps = 1e-3;
  // Check at most this many coordinates (a seeded random subset); 0 = all.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

/// Compares backward() against central differences of f around x. The
/// error per coordinate is |a - n| / max(1e-8, |a| + |n|); the maximum over
/// the checked coordinates is returned.
template <class T>
GradCheckResult finite_diff_check(const ScalarFn<T>& f, const Tensor<T>& x,
                                  const GradCheckOptions& opt = {}) {
  require(opt.eps > 0, Errc::invalid_argument, "finite_diff_check: eps must be > 0");
  Tensor<T> analytic;
  {
    Tape<T> tape;
    auto xv = tape.input(x);
    auto root = f(tape, xv);
    require(root.value().numel() == 1, Errc::non_scalar_root,
            "finite_diff_check: f does not produce a scalar");
    analytic = backward(tape, root, {xv}).wrt(xv);
  }
  auto eval = [&](const Tensor<T>& at) {
    Tape<T> tape;
    auto xv = tape.input(at);
    auto root = f(tape, xv);
    return tape.scalar(root);
  };

  std::vector<std::size_t> coords(x.numel());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  if (opt.max_coords && opt.max_coords < coords.size()) {
    Rng rng(mix_seed(opt.seed, 0x67726164));
    rng.shuffle(coords.begin(), coords.end());
    coords.resize(opt.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckResult res;
  Tensor<T> probe = x;
  for (auto i : coords) {
    const T orig = x[i];
    const T up = static_cast<T>(double(orig) + opt.eps);
    const T down = static_cast<T>(double(orig) - opt.eps);
    probe[i] = up;
    const double fp = eval(probe);
    probe[i] = down;
    const double fm = eval(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (double(up) - double(down));
    const double a = analytic[i];
    const double err = std::abs(a - numeric) /
                       std::max(1e-8, std::abs(a) + std::abs(numeric));
    if (res.checked == 0 || err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
      res.analytic = a;
      res.numeric = numeric;
    }
    ++res.checked;
  }
  return res;
}

}  // namespace meranet

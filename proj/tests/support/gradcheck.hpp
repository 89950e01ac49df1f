#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "vegcast/core/ops.hpp"

namespace vegcast::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

/// Worst relative error between reverse-mode and central-difference gradients of
/// sum(f() * r) with respect to every element of every leaf. Relative error is
/// ||analytic - numeric|| / max(||analytic||, ||numeric||, floor) per leaf.
inline double gradient_check(const std::function<Var<double>()>& f, const std::vector<Var<double>>& leaves,
                             std::mt19937_64& rng, double h = 1e-6, double floor = 1e-7) {
  auto out = f();
  Tensor<double> r = random_tensor(out->value.shape(), rng);
  for (const auto& l : leaves) l->grad = Tensor<double>();
  backward(ops::weighted_sum(out, r));
  out.reset();
  double worst = 0.0;
  for (const auto& l : leaves) {
    Tensor<double> analytic = l->has_grad() ? l->grad : Tensor<double>(l->value.shape());
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < l->value.size(); ++i) {
      const double keep = l->value[i];
      l->value[i] = keep + h;
      const double up = ops::weighted_sum(f(), r)->value[0];
      l->value[i] = keep - h;
      const double down = ops::weighted_sum(f(), r)->value[0];
      l->value[i] = keep;
      const double num = (up - down) / (2 * h);
      diff2 += (analytic[i] - num) * (analytic[i] - num);
      a2 += analytic[i] * analytic[i];
      n2 += num * num;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), floor});
    worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

}  // namespace vegcast::testing

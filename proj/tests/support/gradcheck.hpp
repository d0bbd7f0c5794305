#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "warpvos/ops.hpp"

namespace warpvos::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0, DType dtype = DType::f64) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(shape, v, dtype);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
};

// Central finite differences of sum(f(inputs) * w) for a fixed random w.
// The reported error per input is ||analytic - numeric||_inf divided by
// max(||analytic||_inf, ||numeric||_inf, 1e-6).
inline GradCheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                 std::vector<Tensor> inputs, std::uint64_t seed = 7,
                                 double step = 1e-5) {
  for (auto& t : inputs) t.requires_grad_(true);
  Tensor probe = f(inputs);
  std::mt19937_64 rng(seed);
  Tensor weights = random_tensor(probe.shape(), rng, -1.0, 1.0, probe.dtype());
  auto objective = [&](const std::vector<Tensor>& xs) { return ops::sum(ops::mul(f(xs), weights)); };

  for (auto& t : inputs) t.zero_grad();
  objective(inputs).backward();

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor analytic = inputs[k].grad();
    std::vector<double> numeric(static_cast<std::size_t>(inputs[k].numel()), 0.0);
    auto data = inputs[k].data<double>();
    {
      NoGradGuard ng;
      for (std::size_t i = 0; i < numeric.size(); ++i) {
        const double orig = data[i];
        data[i] = orig + step;
        const double up = objective(inputs).item();
        data[i] = orig - step;
        const double down = objective(inputs).item();
        data[i] = orig;
        numeric[i] = (up - down) / (2.0 * step);
      }
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double a = analytic.defined() ? analytic.at(static_cast<std::int64_t>(i)) : 0.0;
      diff = std::max(diff, std::abs(a - numeric[i]));
      na = std::max(na, std::abs(a));
      nn = std::max(nn, std::abs(numeric[i]));
    }
    const double rel = diff / std::max({na, nn, 1e-6});
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_input = k;
    }
  }
  return result;
}

}  // namespace warpvos::testing

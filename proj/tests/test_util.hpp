#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ttrd3/autograd.hpp"
#include "ttrd3/nn.hpp"

namespace ttrd3::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

/// Norm-wise relative error between the backpropagated gradient of the
/// scalar `f` and central differences, worst case over `params`.
inline double grad_check(const std::function<ag::Var()>& f, std::vector<ag::Var> params, double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  ag::backward(f());
  double worst = 0.0;
  for (auto& p : params) {
    const Tensor analytic = p.grad();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < p.value().size(); ++i) {
      const double orig = p.value()[i];
      p.mutable_value()[i] = orig + h;
      double up;
      double down;
      {
        ag::NoGradGuard g;
        up = f().value()[0];
        p.mutable_value()[i] = orig - h;
        down = f().value()[0];
      }
      p.mutable_value()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double scale = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
    worst = std::max(worst, std::sqrt(diff2) / scale);
  }
  return worst;
}

/// Fixed random projection that turns any output into a scalar.
inline ag::Var project(const ag::Var& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ag::mean_all(ag::mul(x, ag::constant(random_tensor(x.shape(), rng))));
}

}  // namespace ttrd3::testing

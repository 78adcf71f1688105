#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "tscil/core/autograd.hpp"
#include "tscil/core/rng.hpp"
#include "tscil/data/loaders.hpp"

namespace tscil::testing {

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

/// Largest relative error between the analytic gradient of `f` with respect
/// to each parameter and a central finite difference.
inline double grad_check(const std::function<ag::Var(const std::vector<ag::Var>&)>& f,
                         std::vector<ag::Var> params, double h = 1e-6) {
  for (auto& p : params) p->zero_grad();
  ag::backward(f(params));
  double worst = 0.0;
  for (auto& p : params) {
    const Tensor analytic = p->grad.empty() ? Tensor(p->value.shape(), 0.0) : p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      double up;
      double down;
      {
        ag::NoGradGuard g;
        up = f(params)->value[0];
        p->value[i] = orig - h;
        down = f(params)->value[0];
      }
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-4});
      worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
    }
  }
  return worst;
}

inline data::SyntheticConfig small_synthetic(std::uint64_t seed = 0) {
  data::SyntheticConfig c;
  c.classes = 6;
  c.subjects = 3;
  c.channels = 2;
  c.length = 32;
  c.train_per_class_subject = 10;
  c.test_per_class_subject = 4;
  c.seed = seed;
  return c;
}

}  // namespace tscil::testing

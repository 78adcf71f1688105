#include "tscil/core/optim.hpp"

#include <cmath>

namespace tscil {

Adam::Adam(std::vector<ag::Var> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), slots_(params_.size()), lr_(lr), beta1_(beta1), beta2_(beta2),
      eps_(eps) {}

void Adam::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    if (p.grad.empty()) continue;
    auto& s = slots_[i];
    if (s.m.size() != p.value.size()) {
      s.m = Tensor(p.value.shape(), 0.0);
      s.v = Tensor(p.value.shape(), 0.0);
    }
    ++s.steps;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(s.steps));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(s.steps));
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      s.m[j] = beta1_ * s.m[j] + (1.0 - beta1_) * g;
      s.v[j] = beta2_ * s.v[j] + (1.0 - beta2_) * g * g;
      p.value[j] -= lr_ * (s.m[j] / c1) / (std::sqrt(s.v[j] / c2) + eps_);
    }
  }
}

}  // namespace tscil

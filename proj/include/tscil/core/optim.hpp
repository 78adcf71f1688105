#pragma once

#include <vector>

#include "tscil/core/autograd.hpp"

namespace tscil {

/// Adam with bias correction. Parameters whose gradient is empty for a step
/// are left untouched, as are their moment estimates.
class Adam {
 public:
  Adam(std::vector<ag::Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void zero_grad();
  void step();

 private:
  struct Slot {
    Tensor m;
    Tensor v;
    long steps = 0;
  };
  std::vector<ag::Var> params_;
  std::vector<Slot> slots_;
  double lr_, beta1_, beta2_, eps_;
};

}  // namespace tscil

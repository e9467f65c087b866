#pragma once

#include <vector>

#include "docplug/tensor.hpp"

namespace docplug {

// Adam over an explicit parameter list. Parameters outside the list are never
// touched, which is how freeze masks are enforced. A parameter with no
// accumulated gradient is skipped for the step (its moments do not decay), so
// unused parameters stay bitwise unchanged.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  void step();
  void zero_grad();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

}  // namespace docplug

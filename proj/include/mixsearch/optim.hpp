#pragma once

#include <cstddef>
#include <vector>

#include "mixsearch/autodiff.hpp"

namespace mixsearch::optim {

/// Cosine annealing from `base` at step 0 to `floor` at step `total`.
double cosine_lr(double base, std::size_t step, std::size_t total, double floor = 0.0);

/// Momentum SGD with L2 weight decay folded into the gradient:
///   g = grad + wd * w;  v = mu * v + g;  w -= lr * v
class Sgd {
 public:
  Sgd(std::vector<ParamPtr> params, double momentum, double weight_decay);

  void step(double lr);
  void zero_grad();
  const std::vector<ParamPtr>& parameters() const { return params_; }

 private:
  std::vector<ParamPtr> params_;
  std::vector<Tensor> velocity_;
  double momentum_;
  double weight_decay_;
};

/// Adam with bias correction and L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam(std::vector<ParamPtr> params, double beta1, double beta2, double weight_decay,
       double eps = 1e-8);

  void step(double lr);
  void zero_grad();
  long steps_taken() const { return t_; }
  const std::vector<ParamPtr>& parameters() const { return params_; }

 private:
  std::vector<ParamPtr> params_;
  std::vector<Tensor> m_, v_;
  double beta1_, beta2_, weight_decay_, eps_;
  long t_ = 0;
};

}  // namespace mixsearch::optim

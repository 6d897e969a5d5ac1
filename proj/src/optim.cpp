#include "mixsearch/optim.hpp"

#include <cmath>
#include <numbers>

#include "mixsearch/error.hpp"

namespace mixsearch::optim {

double cosine_lr(double base, std::size_t step, std::size_t total, double floor) {
  if (total == 0 || step >= total) return floor;
  const double t = static_cast<double>(step) / static_cast<double>(total);
  return floor + 0.5 * (base - floor) * (1.0 + std::cos(std::numbers::pi * t));
}

Sgd::Sgd(std::vector<ParamPtr> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  if (momentum < 0.0 || momentum >= 1.0 || weight_decay < 0.0) {
    throw Error(Errc::InvalidHyperparameter, "sgd needs momentum in [0,1) and weight decay >= 0");
  }
  for (const auto& p : params_) velocity_.emplace_back(p->value.shape());
}

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    double* w = p.value.data();
    const double* g = p.grad.data();
    double* v = velocity_[i].data();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double gj = g[j] + weight_decay_ * w[j];
      v[j] = momentum_ * v[j] + gj;
      w[j] -= lr * v[j];
    }
  }
}

void Sgd::zero_grad() {
  for (const auto& p : params_) p->zero_grad();
}

Adam::Adam(std::vector<ParamPtr> params, double beta1, double beta2, double weight_decay,
           double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay),
      eps_(eps) {
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || weight_decay < 0.0 ||
      eps <= 0.0) {
    throw Error(Errc::InvalidHyperparameter, "adam betas must lie in [0,1), decay >= 0, eps > 0");
  }
  for (const auto& p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    double* w = p.value.data();
    const double* g = p.grad.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double gj = g[j] + weight_decay_ * w[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (const auto& p : params_) p->zero_grad();
}

}  // namespace mixsearch::optim

#include "mixsearch/rng.hpp"

#include <cmath>
#include <limits>

#include "mixsearch/error.hpp"

namespace mixsearch {

std::uint64_t Rng::index(std::uint64_t n) {
  if (n == 0) throw Error(Errc::InvalidQuery, "Rng::index on empty range");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r = engine_();
  while (r >= limit) r = engine_();
  return r % n;
}

double Rng::normal() {
  if (has_spare_normal_) {
    has_spare_normal_ = false;
    return spare_normal_;
  }
  double u = 0.0, v = 0.0, s = 0.0;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double f = std::sqrt(-2.0 * std::log(s) / s);
  spare_normal_ = v * f;
  has_spare_normal_ = true;
  return u * f;
}

double Rng::gamma(double shape) {
  if (!(shape > 0.0)) throw Error(Errc::InvalidHyperparameter, "gamma shape must be > 0");
  if (shape < 1.0) {
    // Boost to shape + 1 and rescale by U^(1/shape).
    const double g = gamma(shape + 1.0);
    return g * std::pow(uniform(), 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = 0.0, v = 0.0;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
  }
}

double Rng::beta(double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) {
    throw Error(Errc::InvalidHyperparameter, "beta shapes must be > 0");
  }
  if (a <= 1.0 && b <= 1.0) {
    // Johnk: accept when U^(1/a) + V^(1/b) <= 1, evaluated in log space so
    // tiny shapes do not underflow to 0/0.
    for (;;) {
      const double lx = std::log(uniform()) / a;
      const double ly = std::log(uniform()) / b;
      const double m = std::max(lx, ly);
      const double lsum = m + std::log(std::exp(lx - m) + std::exp(ly - m));
      if (lsum <= 0.0) return std::exp(lx - lsum);
    }
  }
  const double x = gamma(a);
  const double y = gamma(b);
  return x / (x + y);
}

}  // namespace mixsearch

#include "mixsearch/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mixsearch/error.hpp"

namespace mixsearch {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

void check_shape(const Shape& s, const char* what) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw Error(Errc::ShapeMismatch, std::string(what) + ": invalid shape " + s.str());
  }
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape) {
  check_shape(shape, "Tensor");
  data_.assign(shape.numel(), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  check_shape(shape, "Tensor");
  if (data_.size() != shape.numel()) {
    throw Error(Errc::ShapeMismatch, "Tensor data length " + std::to_string(data_.size()) +
                                         " does not match shape " + shape.str());
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw Error(Errc::NonScalarOutput, "item() on shape " + shape_.str());
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_(const Tensor& other) {
  if (!(other.shape_ == shape_)) {
    throw Error(Errc::ShapeMismatch, "add_ " + shape_.str() + " vs " + other.shape_.str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor stack_batch(std::span<const Tensor* const> items) {
  if (items.empty()) throw Error(Errc::EmptyInput, "stack_batch of nothing");
  Shape s = items.front()->shape();
  if (s.n != 1) throw Error(Errc::ShapeMismatch, "stack_batch expects single samples");
  Shape out_shape = s;
  out_shape.n = static_cast<int>(items.size());
  Tensor out(out_shape);
  const std::size_t per = s.numel();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!(items[i]->shape() == s)) {
      throw Error(Errc::ShapeMismatch,
                  "stack_batch " + items[i]->shape().str() + " vs " + s.str());
    }
    std::memcpy(out.data() + i * per, items[i]->data(), per * sizeof(double));
  }
  return out;
}

Tensor slice_batch(const Tensor& t, int index) {
  Shape s = t.shape();
  if (index < 0 || index >= s.n) throw Error(Errc::ShapeMismatch, "slice_batch index");
  s.n = 1;
  std::vector<double> data(t.data() + index * s.numel(), t.data() + (index + 1) * s.numel());
  return Tensor(s, std::move(data));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) {
    throw Error(Errc::ShapeMismatch, "max_abs_diff " + a.shape().str() + " vs " + b.shape().str());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace mixsearch

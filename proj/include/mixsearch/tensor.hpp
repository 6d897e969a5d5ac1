#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mixsearch {

/// (batch, channel, height, width); every extent is at least 1.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
           static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense rank-4 array of doubles in row-major (n, c, h, w) order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  double& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  double at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  /// Contiguous view of sample n, channel c.
  std::span<double> plane(int n, int c) {
    return std::span<double>(data_).subspan(offset(n, c, 0, 0), shape_.plane());
  }
  std::span<const double> plane(int n, int c) const {
    return std::span<const double>(data_).subspan(offset(n, c, 0, 0), shape_.plane());
  }

  double item() const;
  void fill(double v);
  void add_(const Tensor& other);
  bool all_finite() const;

 private:
  Shape shape_{};
  std::vector<double> data_;
};

/// Validates every extent >= 1; throws ShapeMismatch otherwise.
void check_shape(const Shape& s, const char* what);

/// Stacks single-sample tensors (n == 1) along the batch axis.
Tensor stack_batch(std::span<const Tensor* const> items);

/// Copies sample `index` out of a batch.
Tensor slice_batch(const Tensor& t, int index);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mixsearch

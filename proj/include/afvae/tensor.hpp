#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace afvae {

/// NCHW extent. Vectors are stored as N x C x 1 x 1.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t sample() const { return static_cast<std::size_t>(c) * h * w; }

  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense double-precision NCHW tensor with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  double at(int n, int c, int h, int w) const {
    return data_[index(n, c, h, w)];
  }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w +
           w;
  }

  /// Same storage, new extent. Element count must match.
  Tensor reshaped(Shape shape) const;
  /// Copy of samples [begin, begin + count).
  Tensor slice_batch(int begin, int count) const;
  void fill(double v);

  double sum() const;
  double abs_max() const;
  bool all_finite() const;

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<double> data_;
};

/// Stacks same-shaped tensors along the batch axis.
Tensor concat_batch(std::span<const Tensor> parts);

inline void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

}  // namespace afvae

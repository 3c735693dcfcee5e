#include "afvae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace afvae {

std::string Shape::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(shape), data_(std::move(data)) {
  require(data_.size() == shape_.numel(),
          "tensor data size does not match shape " + shape_.str());
}

Tensor Tensor::reshaped(Shape shape) const {
  require(shape.numel() == numel(),
          "reshape " + shape_.str() + " -> " + shape.str());
  return Tensor(shape, data_);
}

Tensor Tensor::slice_batch(int begin, int count) const {
  require(begin >= 0 && count >= 0 && begin + count <= shape_.n,
          "slice_batch out of range");
  Shape s = shape_;
  s.n = count;
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(begin * shape_.sample());
  return Tensor(s, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(s.numel())));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::abs_max() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor concat_batch(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_batch of nothing");
  Shape s = parts.front().shape();
  int n = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    require(ps.c == s.c && ps.h == s.h && ps.w == s.w,
            "concat_batch shape mismatch " + ps.str() + " vs " + s.str());
    n += ps.n;
  }
  s.n = n;
  std::vector<double> data;
  data.reserve(s.numel());
  for (const auto& p : parts) data.insert(data.end(), p.vec().begin(), p.vec().end());
  return Tensor(s, std::move(data));
}

}  // namespace afvae

#include "sdreid/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sdreid/errors.hpp"

namespace sdreid {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ContractError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
    throw ContractError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                        shape_str(shape_));
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != static_cast<int64_t>(data_.size())) {
    throw ContractError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::rows(int64_t begin, int64_t end) const {
  if (shape_.size() != 2 || begin < 0 || end > shape_[0] || begin > end) {
    throw ContractError("bad row range on " + shape_str(shape_));
  }
  const int64_t c = shape_[1];
  return Tensor({end - begin, c}, std::vector<double>(data_.begin() + begin * c, data_.begin() + end * c));
}

std::vector<double> Tensor::row(int64_t r) const {
  const int64_t c = shape_.back();
  return std::vector<double>(data_.begin() + r * c, data_.begin() + (r + 1) * c);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ContractError("max_abs_diff size mismatch");
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_rel_diff(const Tensor& a, const Tensor& b) {
  double scale = 0.0;
  for (size_t i = 0; i < b.size(); ++i) scale = std::max(scale, std::abs(b[i]));
  return max_abs_diff(a, b) / std::max(scale, 1e-300);
}

}  // namespace sdreid

#include "ndl/tensor.hpp"

#include <cmath>
#include <sstream>

namespace ndl {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, double fill)
    : shape(std::move(s)),
      values(static_cast<std::size_t>(numel(shape)), fill) {}

void Tensor::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!grad.empty()) grad.assign(grad.size(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

TensorPtr make_tensor(Shape shape, double fill) {
  return std::make_shared<Tensor>(std::move(shape), fill);
}

TensorPtr make_scalar(double v) {
  auto t = std::make_shared<Tensor>(Shape{1});
  t->values[0] = v;
  return t;
}

void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite())
    throw NumericError(std::string("non-finite values in ") + what);
}

void zero_grads(const std::vector<TensorPtr>& params) {
  for (const auto& p : params) {
    p->ensure_grad();
    p->zero_grad();
  }
}

}  // namespace ndl

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ndl/errors.hpp"

namespace ndl {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense N-d array of doubles with an optional same-shape gradient slot.
// Canonical activation layout is [batch, channel, z, y, x]. Values are
// written once by the producing op; only the grad slot mutates afterwards.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);

  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until ensure_grad()

  std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  void ensure_grad();
  void zero_grad();
  bool has_grad() const { return !grad.empty(); }
  bool all_finite() const;
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr make_tensor(Shape shape, double fill = 0.0);
TensorPtr make_scalar(double v);

// Throws NumericError naming `what` if any value is NaN/Inf.
void check_finite(const Tensor& t, const char* what);

void zero_grads(const std::vector<TensorPtr>& params);

}  // namespace ndl

#pragma once

#include <vector>

#include "ndl/graph.hpp"
#include "ndl/tensor.hpp"

namespace ndl::ops {

// Every op takes an optional tape. With g == nullptr the forward math is
// identical but nothing is recorded (inference path, thread-safe on shared
// read-only tensors).

enum class Padding { Same, Valid };
enum class Mode { Train, Infer };

// ---------------------------------------------------------------------------
// Layer primitives
// ---------------------------------------------------------------------------

// 3x3x3 stride-1 cross-correlation over [b,cin,z,y,x] with kernel
// [cout,cin,3,3,3] and bias [cout]. Same-padding zero-pads to preserve the
// spatial extents; valid requires every spatial extent >= 3.
TensorPtr conv3d(Graph* g, const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, Padding padding);

// Per-channel running statistics for batch normalization. Initialized to
// mean 0 / var 1 and updated by EMA in train mode; both arrays use the
// biased (1/M) variance so train and infer share the same normalizer.
struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;
  double momentum = 0.1;

  explicit BatchNormStats(int channels = 0)
      : mean(static_cast<std::size_t>(channels), 0.0),
        var(static_cast<std::size_t>(channels), 1.0) {}
};

// Normalizes per channel over (b,z,y,x) with batch statistics and updates
// the running stats. Requires b*z*y*x >= 2.
TensorPtr batch_norm_train(Graph* g, const TensorPtr& x, const TensorPtr& gamma,
                           const TensorPtr& beta, BatchNormStats& stats,
                           double eps = 1e-5);

// Normalizes with the running statistics; stats are read-only.
TensorPtr batch_norm_infer(Graph* g, const TensorPtr& x, const TensorPtr& gamma,
                           const TensorPtr& beta, const BatchNormStats& stats,
                           double eps = 1e-5);

TensorPtr batch_norm(Graph* g, const TensorPtr& x, const TensorPtr& gamma,
                     const TensorPtr& beta, BatchNormStats& stats, Mode mode,
                     double eps = 1e-5);

// Elementwise max(0,x); the subgradient at exactly 0 is 0.
TensorPtr relu(Graph* g, const TensorPtr& x);

// Elementwise logistic.
TensorPtr sigmoid(Graph* g, const TensorPtr& x);

// Row-wise exponential normalization of a [b,k] tensor.
TensorPtr softmax(Graph* g, const TensorPtr& x);

// Non-overlapping 2x2 max over the (y,x) plane only; z is untouched.
// Requires even y and x (never pads silently). Ties route the gradient to
// the first window element in row-major order.
TensorPtr max_pool_xy(Graph* g, const TensorPtr& x);

// Factor-2 bilinear interpolation in the (y,x) plane, half-pixel-center
// convention with border clamping; z untouched; exactly linear.
TensorPtr bilinear_upsample_xy(Graph* g, const TensorPtr& x);

// Affine map x[b,n] * W[m,n]^T + bias[m] -> [b,m].
TensorPtr fully_connected(Graph* g, const TensorPtr& x, const TensorPtr& weight,
                          const TensorPtr& bias);

// [b, ...] -> [b, prod(...)], copy with pass-through gradient.
TensorPtr flatten_to_rows(Graph* g, const TensorPtr& x);

// Channel concatenation of two [b,c,z,y,x] tensors with equal non-channel
// dims (encoder-to-decoder skip connections).
TensorPtr concat_channels(Graph* g, const TensorPtr& a, const TensorPtr& b);

// ---------------------------------------------------------------------------
// Small composition ops (used by tests and loss plumbing)
// ---------------------------------------------------------------------------

TensorPtr add(Graph* g, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Graph* g, const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(Graph* g, const TensorPtr& x, double k);
TensorPtr sum(Graph* g, const TensorPtr& x);  // -> scalar [1]

}  // namespace ndl::ops

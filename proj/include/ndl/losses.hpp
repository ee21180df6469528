#pragma once

#include <vector>

#include "ndl/graph.hpp"
#include "ndl/ops.hpp"
#include "ndl/tensor.hpp"

namespace ndl {

// Weighted two-task objective: w_cls * L_cls + w_seg * L_seg + lambda*||w||^2.
// Setting one weight to 0 recovers the single-task baselines inside the same
// code path.
struct MultiTaskLossConfig {
  double w_cls = 1.0;
  double w_seg = 1.0;
  double lambda = 0.0;
  double clamp_eps = 1e-7;  // probability clamp applied before any log

  void validate() const;  // throws ConfigError naming the violated constraint
};

namespace ops {

// Mean over the batch of -log p[i, label_i], with p clamped to
// [clamp_eps, 1-clamp_eps] before the log. Labels must be 0 or 1.
TensorPtr cross_entropy_class(Graph* g, const TensorPtr& probs,
                              const std::vector<int>& labels, double clamp_eps);

// Mean over all voxels of -[t*log p + (1-t)*log(1-p)], p clamped as above.
// Target values must be exactly 0 or 1.
TensorPtr cross_entropy_voxel(Graph* g, const TensorPtr& probs,
                              const TensorPtr& target, double clamp_eps);

// Row-gated variant: rows with weight 0 are excluded and the mean is taken
// over included voxels only. All weights 0 yields a constant 0 loss.
TensorPtr cross_entropy_voxel_rows(Graph* g, const TensorPtr& probs,
                                   const TensorPtr& target,
                                   const std::vector<double>& row_weight,
                                   double clamp_eps);

// w_cls*cls_loss + w_seg*seg_loss + lambda * sum over params of ||p||^2.
TensorPtr multi_task_loss(Graph* g, const TensorPtr& cls_loss,
                          const TensorPtr& seg_loss,
                          const std::vector<TensorPtr>& params,
                          const MultiTaskLossConfig& cfg);

}  // namespace ops
}  // namespace ndl

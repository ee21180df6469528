#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ndl/tensor.hpp"

namespace ndl {

// Bias-corrected ADAM. Moment arrays are allocated lazily on the first step
// and stay shape-locked to their parameters afterwards. One state belongs to
// exactly one training loop.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  std::uint64_t step_count = 0;
  std::vector<std::vector<double>> m;  // first moments, one per parameter
  std::vector<std::vector<double>> v;  // second moments

  void save(const std::filesystem::path& path) const;
  static AdamState load(const std::filesystem::path& path);
};

// One update over all parameters; every parameter must have a populated grad.
void adam_step(const std::vector<TensorPtr>& params, AdamState& state);

}  // namespace ndl

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ndl/data.hpp"
#include "ndl/graph.hpp"
#include "ndl/ops.hpp"

namespace ndl {

// Declarative description of the 19-layer shared-trunk/two-head network:
// 14 conv(+BN+ReLU) trunk layers with xy pooling/upsampling interleaved,
// a 2-layer segmentation head (conv + sigmoid) and a 3-layer classification
// head (conv + FC + FC, softmax output).
struct NetworkConfig {
  Extents input_shape{8, 32, 32};  // z,y,x
  std::vector<int> channels_per_stage{16, 16, 32, 32, 64, 64, 64,
                                      64, 64, 32, 32, 16, 16, 16};
  std::vector<int> pool_positions{2, 4, 6};  // 1-based; pool follows that layer
  std::vector<int> upsample_positions{8, 10, 12};
  int fc_hidden = 1024;
  int cls_head_channels = 2;  // kernels in the classification head conv
  // Concatenation skips from each pre-pool encoder map to the matching
  // post-upsample decoder layer. Off by default; the trunk stays 14 convs
  // either way.
  bool skip_connections = false;
  std::uint64_t seed = 7;

  void validate() const;         // throws ConfigError naming the constraint
  std::string signature() const; // human-readable architecture string
  std::uint64_t digest() const;  // hash of signature(); seed excluded
};

struct ConvBnLayer {
  TensorPtr kernel, bias, gamma, beta;
  ops::BatchNormStats stats;
};

struct HeadOutputs {
  TensorPtr class_probs;  // [b,2], rows sum to 1; index 1 = nodule
  TensorPtr seg_probs;    // [b,1,z,y,x] in (0,1)
};

struct Prediction {
  double nodule_prob;
  Mask mask;
};

class MultiTaskNet {
 public:
  static MultiTaskNet build(const NetworkConfig& cfg);

  // Single trunk pass feeding both heads. Train mode records onto g and
  // updates BN running statistics; infer mode may pass g = nullptr.
  HeadOutputs forward(Graph* g, const TensorPtr& batch, ops::Mode mode);

  // Read-only inference (BN uses running stats); safe to share across
  // threads.
  HeadOutputs forward(const TensorPtr& batch) const;

  Prediction predict(const Volume& patch, double seg_threshold) const;

  // Fixed enumeration order (trunk, seg head, cls head); the optimizer and
  // the weights file both follow it.
  std::vector<TensorPtr> parameters() const;
  std::vector<TensorPtr> seg_head_parameters() const;
  std::vector<TensorPtr> cls_head_parameters() const;

  const NetworkConfig& config() const { return cfg_; }

  // NDLW container: magic, version, config digest + signature, named arrays
  // ordered by layer index (f64 LE, row-major, BN running stats included),
  // trailing FNV-1a checksum of the array payload.
  void save_weights(const std::filesystem::path& path) const;
  static MultiTaskNet load_weights(const std::filesystem::path& path,
                                   const NetworkConfig& cfg);

 private:
  template <typename NetT>
  static HeadOutputs run_forward(NetT& net, Graph* g, const TensorPtr& batch,
                                 ops::Mode mode);

  NetworkConfig cfg_;
  std::vector<ConvBnLayer> trunk_;
  TensorPtr seg_kernel_, seg_bias_;
  ConvBnLayer cls_conv_;
  TensorPtr fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

// [n,1,z,y,x] double batch from float volumes.
TensorPtr batch_from_volumes(const std::vector<const Volume*>& patches);

}  // namespace ndl

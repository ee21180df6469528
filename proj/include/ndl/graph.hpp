#pragma once

#include <functional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ndl/tensor.hpp"

namespace ndl {

// Reverse-mode tape. Ops append nodes in execution order (so the list is
// topologically sorted by construction); backward() replays it in reverse.
//
// Gradient semantics: every pass is computed from zero and then merged into
// the pre-pass leaf gradients with one addition per element, so gradients
// accumulate additively across passes and running backward twice without a
// reset doubles every leaf grad exactly.
class Graph {
 public:
  void record(const char* op, std::vector<TensorPtr> inputs, TensorPtr output,
              std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss)=1 and propagates to every reachable leaf.
  // Throws UsageError if loss is not a scalar produced by this graph.
  void backward(const TensorPtr& loss);

  void clear();

  std::size_t node_count() const { return nodes_.size(); }
  bool produced(const Tensor* t) const { return outputs_.count(t) != 0; }

 private:
  struct Node {
    const char* op;
    std::vector<TensorPtr> inputs;
    TensorPtr output;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  std::unordered_set<const Tensor*> outputs_;
};

}  // namespace ndl

#include "ndl/graph.hpp"

namespace ndl {

void Graph::record(const char* op, std::vector<TensorPtr> inputs,
                   TensorPtr output, std::function<void()> backward_fn) {
  outputs_.insert(output.get());
  nodes_.push_back(
      Node{op, std::move(inputs), std::move(output), std::move(backward_fn)});
}

void Graph::backward(const TensorPtr& loss) {
  if (!loss || loss->size() != 1)
    throw UsageError("backward requires a scalar loss");
  if (!produced(loss.get()))
    throw UsageError("backward: loss was not produced by this graph");

  // Leaves = inputs that are not produced by this graph. Their pre-pass grads
  // are parked aside so the pass itself always starts from zero.
  std::unordered_map<Tensor*, std::vector<double>> parked;
  for (auto& n : nodes_) {
    for (auto& in : n.inputs) {
      if (outputs_.count(in.get()) || parked.count(in.get())) continue;
      in->ensure_grad();
      parked.emplace(in.get(), std::move(in->grad));
      in->grad.assign(in->values.size(), 0.0);
    }
  }
  for (auto& n : nodes_) {
    n.output->ensure_grad();
    n.output->zero_grad();
  }

  loss->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward_fn();

  // One addition per element keeps cross-pass accumulation exact.
  for (auto& [t, prev] : parked) {
    for (std::size_t i = 0; i < prev.size(); ++i) t->grad[i] = prev[i] + t->grad[i];
  }
}

void Graph::clear() {
  nodes_.clear();
  outputs_.clear();
}

}  // namespace ndl

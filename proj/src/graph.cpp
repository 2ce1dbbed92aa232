#include "spadapt/graph.hpp"

namespace spadapt {

bool Graph::tracks(std::initializer_list<const Tensor*> inputs) const {
  if (!recording()) return false;
  for (const Tensor* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

bool Graph::tracks(const std::vector<Tensor>& inputs) const {
  if (!recording()) return false;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

void Graph::record(std::string op, Tensor output, std::function<void()> backward_rule) {
  if (consumed_) throw TensorError("graph already consumed by backward(); build a new one");
  output.set_requires_grad(true);
  records_.push_back({std::move(op), std::move(output), std::move(backward_rule)});
}

void Graph::backward(const Tensor& loss) {
  if (consumed_) throw TensorError("backward() called twice on the same graph");
  if (loss.numel() != 1) {
    throw TensorError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  consumed_ = true;
  if (!loss.requires_grad()) return;

  Tensor seed = loss;
  dispatch(seed.dtype(), [&](auto tag) {
    using T = decltype(tag);
    seed.mutable_grad<T>()[0] += T(1);
  });

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // does not reach the loss
    it->backward_rule();
  }
  // Drop closures so intermediate buffers are released with the graph.
  records_.clear();
}

}  // namespace spadapt

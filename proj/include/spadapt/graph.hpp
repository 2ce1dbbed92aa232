#pragma once

#include <functional>
#include <string>
#include <vector>

#include "spadapt/tensor.hpp"

namespace spadapt {

/// Tape of differentiable op records in the order they were executed.
///
/// Ops append a record only when recording is on and at least one input
/// requires a gradient. backward() replays the tape in reverse, once; a
/// second call without rebuilding the graph throws.
class Graph {
 public:
  enum class Mode { record, no_grad };

  explicit Graph(Mode mode = Mode::record) : mode_(mode) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return mode_ == Mode::record; }

  /// True when an op over `inputs` must be recorded.
  bool tracks(std::initializer_list<const Tensor*> inputs) const;
  bool tracks(const std::vector<Tensor>& inputs) const;

  /// Registers `output` as produced by `op`. The backward rule reads the
  /// output gradient and accumulates into the inputs that require one.
  void record(std::string op, Tensor output, std::function<void()> backward_rule);

  void backward(const Tensor& loss);

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Record {
    std::string op;
    Tensor output;
    std::function<void()> backward_rule;
  };

  Mode mode_;
  bool consumed_ = false;
  std::vector<Record> records_;
};

}  // namespace spadapt

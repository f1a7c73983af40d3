#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "poisonguard/tensor/tensor.hpp"

namespace poisonguard {

/// Tape of operations recorded during a forward pass. Each record keeps the
/// closure that recomputes its output and the closure that pushes the
/// output gradient back into its inputs.
///
/// Gradients accumulate into leaves that have `requires_grad`; tensors that
/// are outputs of recorded ops get their gradient buffers reset at the start
/// of every backward pass, so calling backward twice doubles leaf gradients.
template <typename T>
class Graph {
 public:
  struct Record {
    std::string op;
    std::vector<Var<T>> inputs;
    Var<T> output;
    std::function<void()> forward;
    std::function<void()> backward;
  };

  /// With `record_backward == false` ops run but nothing is kept; used for
  /// inference passes.
  explicit Graph(bool record_backward = true) : recording_(record_backward) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  bool recording() const { return recording_; }
  const std::vector<Record>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  /// Runs `forward` once and, when recording, appends the record. The
  /// output requires grad iff any input does.
  Var<T> record(std::string op, std::vector<Var<T>> inputs, Var<T> output,
                std::function<void()> forward, std::function<void()> backward) {
    forward();
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in->requires_grad;
    output->requires_grad = needs;
    if (recording_) {
      records_.push_back(Record{std::move(op), std::move(inputs), output,
                                std::move(forward), std::move(backward)});
    }
    return output;
  }

  /// Re-executes every recorded forward closure in order.
  void replay() {
    for (auto& r : records_) r.forward();
  }

  void backward(const Var<T>& loss) {
    if (!recording_) throw std::logic_error("backward on a non-recording graph");
    if (records_.empty()) throw std::logic_error("backward called before any forward op");
    if (loss->numel() != 1) {
      throw ShapeError("backward needs a scalar loss, got " + shape_str(loss->shape));
    }
    bool found = false;
    for (auto& r : records_) {
      r.output->grad.assign(r.output->numel(), T{0});
      found = found || r.output == loss;
    }
    if (!found) throw std::logic_error("loss was not produced by this graph");
    loss->grad[0] = T{1};
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->requires_grad) it->backward();
    }
  }

 private:
  bool recording_;
  std::vector<Record> records_;
};

template <typename T>
void zero_grads(const std::vector<Var<T>>& params) {
  for (const auto& p : params) p->zero_grad();
}

}  // namespace poisonguard

#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "burstiq/numerics/tensor.hpp"

namespace burstiq::numerics {

// Define-by-run reverse-mode tape. Ops append nodes in execution order, which
// is a topological order by construction; backward() walks it once in reverse.
// A tape is single-use and confined to one worker.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ~Tape() {
    for (auto& node : nodes_) {
      for (auto& in : node.inputs) in->tape_uses--;
      node.output->tape_uses--;
    }
  }

  void record(std::string op, std::vector<Tensor<T>> inputs, const Tensor<T>& output,
              std::function<void()> backward) {
    Node node;
    node.op = std::move(op);
    node.inputs.reserve(inputs.size());
    for (auto& in : inputs) {
      in.impl()->tape_uses++;
      node.inputs.push_back(in.impl());
    }
    node.output = output.impl();
    node.output->tape_uses++;
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
  }

  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void backward(const Tensor<T>& loss) {
    if (consumed_) throw NumericError("backward: tape already consumed; rebuild the graph");
    if (loss.size() != 1)
      throw NumericError("backward: loss must be scalar, got shape " +
                         shape_string(loss.shape()));
    bool attached = false;
    for (const auto& node : nodes_)
      if (node.output == loss.impl()) {
        attached = true;
        break;
      }
    if (!attached) throw NumericError("backward: loss tensor is detached from this tape");
    consumed_ = true;
    loss.impl()->grad.assign(1, T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // no downstream contribution
      it->backward();
    }
  }

  // Name of the first recorded op whose output contains a non-finite value,
  // for divergence diagnostics. Empty when everything is finite.
  std::string first_nonfinite_op() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      for (T v : nodes_[i].output->values) {
        if (!std::isfinite(static_cast<double>(v)))
          return nodes_[i].op + " (node " + std::to_string(i) + ")";
      }
    }
    return {};
  }

 private:
  struct Node {
    std::string op;
    std::vector<std::shared_ptr<TensorData<T>>> inputs;
    std::shared_ptr<TensorData<T>> output;
    std::function<void()> backward;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

namespace detail {

template <typename T>
inline std::vector<T>& ensure_grad(TensorData<T>& d) {
  if (d.grad.empty()) d.grad.assign(d.values.size(), T(0));
  return d.grad;
}

}  // namespace detail

}  // namespace burstiq::numerics

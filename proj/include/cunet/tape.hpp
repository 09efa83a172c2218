#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "cunet/tensor.hpp"

namespace cunet {

// Records differentiable operations in execution order and replays them in
// reverse. Nodes are appended as ops run, so the record order is always a
// valid topological order.
template <typename T>
class Tape {
 public:
  // Receives the output gradient; accumulates into the inputs it captured.
  using BackwardFn = std::function<void(std::span<const T> out_grad)>;

  struct Node {
    std::string kind;
    std::vector<std::size_t> parents;
    Tensor<T> output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Links output to a new node. inputs are used only to derive parent ids.
  std::size_t record(std::string kind, std::initializer_list<const Tensor<T>*> inputs,
                     Tensor<T>& output, BackwardFn fn);
  std::size_t record(std::string kind, const std::vector<const Tensor<T>*>& inputs,
                     Tensor<T>& output, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and runs every reachable node once, newest first.
  // Intermediate gradients are released after use; leaf gradients accumulate.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

// True when any input needs a gradient and a tape is present.
template <typename T>
bool should_record(const Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
  if (tape == nullptr) return false;
  for (const auto* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  return false;
}

}  // namespace cunet

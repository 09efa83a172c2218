#include "cunet/tape.hpp"

#include <stdexcept>

namespace cunet {

template <typename T>
std::size_t Tape<T>::record(std::string kind, std::initializer_list<const Tensor<T>*> inputs,
                            Tensor<T>& output, BackwardFn fn) {
  return record(std::move(kind), std::vector<const Tensor<T>*>(inputs), output, std::move(fn));
}

template <typename T>
std::size_t Tape<T>::record(std::string kind, const std::vector<const Tensor<T>*>& inputs,
                            Tensor<T>& output, BackwardFn fn) {
  Node n;
  n.kind = std::move(kind);
  for (const auto* in : inputs) {
    if (in != nullptr && in->defined() && in->node() && in->tape_id() == this)
      n.parents.push_back(*in->node());
  }
  const std::size_t id = nodes_.size();
  output.s_->requires_grad = true;
  output.s_->node = id;
  output.s_->tape = this;
  n.output = output;
  n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return id;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                shape_str(loss.shape()));
  if (!loss.node() || loss.tape_id() != this)
    throw std::invalid_argument("backward: loss was not recorded on this tape");

  const std::size_t start = *loss.node();
  Tensor<T> seed = nodes_[start].output;
  seed.grad_buffer()[0] += T(1);

  for (std::size_t i = start + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.output.has_grad()) continue;
    // Move the gradient out so the node's buffer is released as we go.
    std::vector<T> g;
    g.swap(n.output.s_->grad);
    n.backward(g);
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace cunet

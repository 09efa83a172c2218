#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cunet/tape.hpp"
#include "cunet/tensor.hpp"

namespace cunet {

// Which U-Nets (1-based) carry a supervision head.
struct SupervisionPlan {
  std::size_t unets = 0;
  std::size_t count = 0;
  std::vector<std::size_t> indices;  // strictly increasing, last == unets
};

// Spreads `count` heads over `unets` U-Nets as evenly as possible, always
// supervising the last one: index_k = ceil(k·U/S) for k = 1..S.
SupervisionPlan place_supervisions(std::size_t count, std::size_t unets);

// Checks the plan's invariants: size, final index, strict order and gaps that
// differ by at most one (the first gap is measured from zero).
bool is_uniform(const SupervisionPlan& plan);

// Arithmetic mean over heads of the MSE against one shared target.
template <typename T>
Tensor<T> total_loss(Tape<T>* tape, std::span<const Tensor<T>> heads, const Tensor<T>& target);

}  // namespace cunet

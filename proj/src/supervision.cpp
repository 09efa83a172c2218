#include "cunet/supervision.hpp"

#include <stdexcept>
#include <string>

#include "cunet/ops.hpp"

namespace cunet {

SupervisionPlan place_supervisions(std::size_t count, std::size_t unets) {
  if (count < 1 || count > unets)
    throw std::invalid_argument("place_supervisions: need 1 <= S <= U, got S=" +
                                std::to_string(count) + ", U=" + std::to_string(unets));
  SupervisionPlan plan{unets, count, {}};
  for (std::size_t k = 1; k <= count; ++k) plan.indices.push_back((k * unets + count - 1) / count);
  return plan;
}

bool is_uniform(const SupervisionPlan& plan) {
  if (plan.indices.size() != plan.count || plan.indices.empty()) return false;
  if (plan.indices.back() != plan.unets) return false;
  std::size_t prev = 0, min_gap = plan.unets, max_gap = 0;
  for (std::size_t idx : plan.indices) {
    if (idx <= prev) return false;
    min_gap = std::min(min_gap, idx - prev);
    max_gap = std::max(max_gap, idx - prev);
    prev = idx;
  }
  return max_gap - min_gap <= 1;
}

template <typename T>
Tensor<T> total_loss(Tape<T>* tape, std::span<const Tensor<T>> heads, const Tensor<T>& target) {
  if (heads.empty()) throw std::invalid_argument("total_loss: no supervision heads");
  Tensor<T> acc = ops::mse_loss(tape, heads[0], target);
  for (std::size_t h = 1; h < heads.size(); ++h)
    acc = ops::add(tape, acc, ops::mse_loss(tape, heads[h], target));
  if (heads.size() == 1) return acc;
  return ops::scale(tape, acc, T(1) / static_cast<T>(heads.size()));
}

template Tensor<float> total_loss(Tape<float>*, std::span<const Tensor<float>>,
                                  const Tensor<float>&);
template Tensor<double> total_loss(Tape<double>*, std::span<const Tensor<double>>,
                                   const Tensor<double>&);

}  // namespace cunet

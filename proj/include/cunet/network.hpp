#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "cunet/graph.hpp"
#include "cunet/ops.hpp"
#include "cunet/tape.hpp"
#include "cunet/tensor.hpp"

namespace cunet {

// Named parameter values and normalization statistics for one graph.
template <typename T>
struct ParameterStore {
  std::map<std::string, Tensor<T>> params;
  std::map<std::string, ops::BatchNormStats<T>> bn_stats;  // keyed by BN node name

  std::uint64_t scalar_count() const;
  void zero_grad();
  // Deep copy in another precision. Gradients are not copied.
  template <typename U>
  ParameterStore<U> cast() const;
};

// He-normal conv weights (variance 2/fan_in), zero biases, gamma 1, beta 0,
// running mean 0 and variance 1. Each tensor draws from its own stream seeded
// by (seed, name), so a parameter's initial value does not depend on which
// other parameters exist.
template <typename T>
ParameterStore<T> init_parameters(const NetworkGraph& g, std::uint64_t seed);

// Optional extras gathered during forward().
template <typename T>
struct ForwardTrace {
  bool keep_activations = false;
  std::vector<Tensor<T>> activations;  // indexed by node id, when kept
  // Smallest |x| over every ReLU input; used to keep finite-difference checks
  // away from kinks.
  double min_relu_input = std::numeric_limits<double>::infinity();
  // Fingerprint of every ReLU sign and max-pool choice, when recorded. Equal
  // fingerprints mean the same piecewise-smooth region.
  bool record_pattern = false;
  std::uint64_t pattern = 0;
  // Train-mode running-statistics momentum; 0 copies the batch statistics.
  T bn_momentum = T(ops::kBatchNormMomentum);
};

// Runs the graph on x (N × in_channels × input_res × input_res) and returns one
// prediction per supervision head, final head last. Records on tape when given.
template <typename T>
std::vector<Tensor<T>> forward(const NetworkGraph& g, ParameterStore<T>& store,
                               const Tensor<T>& x, ops::Mode mode, Tape<T>* tape = nullptr,
                               ForwardTrace<T>* trace = nullptr);

// Sets every running statistic to the batch statistics of x, as seen by a
// train-mode pass (unbiased variance).
template <typename T>
void set_bn_stats_from_batch(const NetworkGraph& g, ParameterStore<T>& store, const Tensor<T>& x);

class MissingParameterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Throws MissingParameterError naming the first parameter or statistic that
// is absent or has the wrong shape.
template <typename T>
void check_parameters(const NetworkGraph& g, const ParameterStore<T>& store);

template <typename T>
template <typename U>
ParameterStore<U> ParameterStore<T>::cast() const {
  ParameterStore<U> out;
  for (const auto& [name, t] : params) out.params.emplace(name, tensor_cast<U>(t));
  for (const auto& [name, s] : bn_stats) {
    ops::BatchNormStats<U> c(s.mean.size());
    for (std::size_t i = 0; i < s.mean.size(); ++i) {
      c.mean[i] = static_cast<U>(s.mean[i]);
      c.var[i] = static_cast<U>(s.var[i]);
    }
    out.bn_stats.emplace(name, std::move(c));
  }
  return out;
}

}  // namespace cunet

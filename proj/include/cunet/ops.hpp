#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cunet/tape.hpp"
#include "cunet/tensor.hpp"

// Differentiable tensor operations. Every op takes the tape first; passing
// nullptr (or inputs that need no gradient) runs the op without recording.
namespace cunet::ops {

enum class Mode { Train, Eval };

// Cross-correlation (no kernel flip). x: N×Cin×H×W, w: Cout×Cin×kh×kw, b: Cout.
template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride = 1, std::size_t pad = 0);

// Running statistics for one normalization layer, updated in train mode as
// running = momentum * running + (1 - momentum) * batch.
template <typename T>
struct BatchNormStats {
  std::vector<T> mean;
  std::vector<T> var;

  explicit BatchNormStats(std::size_t channels = 0) : mean(channels, T(0)), var(channels, T(1)) {}
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

template <typename T>
Tensor<T> batch_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BatchNormStats<T>& stats, Mode mode,
                     T eps = T(kBatchNormEps), T momentum = T(kBatchNormMomentum));

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x);

// 2×2 window, stride 2. Ties resolve to the first element in row-major order.
template <typename T>
Tensor<T> max_pool2(Tape<T>* tape, const Tensor<T>& x);

template <typename T>
Tensor<T> upsample_nearest2(Tape<T>* tape, const Tensor<T>& x);

// Concatenation along axis 1 of N×C×H×W tensors. A single input is returned
// as-is.
template <typename T>
Tensor<T> concat_channels(Tape<T>* tape, std::span<const Tensor<T>> xs);

// Channels [begin, end) of an N×C×H×W tensor.
template <typename T>
Tensor<T> slice_channels(Tape<T>* tape, const Tensor<T>& x, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y);

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T factor);

// Sum of all elements, as a scalar tensor.
template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x);

// Mean of squared differences. target must not require a gradient.
template <typename T>
Tensor<T> mse_loss(Tape<T>* tape, const Tensor<T>& pred, const Tensor<T>& target);

}  // namespace cunet::ops

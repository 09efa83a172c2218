#include "cunet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>

namespace cunet::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_rank4(const Tensor<T>& x, const char* op, const char* what) {
  if (!x.defined() || x.rank() != 4)
    throw ShapeError(std::string(op) + ": " + what + " must be N×C×H×W, got " +
                     shape_str(x.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return ho * wo; }
  std::size_t cols() const { return n * ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// col is K × (N·P), row-major, with row r = (c·kh + i)·kw + j.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t P = g.p(), cols = g.cols();
  if (g.pointwise()) {
    for (std::size_t c = 0; c < g.cin; ++c)
      for (std::size_t n = 0; n < g.n; ++n)
        std::memcpy(col + c * cols + n * P, x + (n * g.cin + c) * P, P * sizeof(T));
    return;
  }
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* plane = x + (n * g.cin + c) * g.h * g.w;
          T* dst = row + n * P;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
            T* drow = dst + oy * g.wo;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill(drow, drow + g.wo, T(0));
              continue;
            }
            const T* srow = plane + iy * g.w;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
              drow[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : srow[ix];
            }
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* gx) {
  const std::size_t P = g.p(), cols = g.cols();
  if (g.pointwise()) {
    for (std::size_t c = 0; c < g.cin; ++c)
      for (std::size_t n = 0; n < g.n; ++n) {
        const T* src = col + c * cols + n * P;
        T* dst = gx + (n * g.cin + c) * P;
        for (std::size_t p = 0; p < P; ++p) dst[p] += src[p];
      }
    return;
  }
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* plane = gx + (n * g.cin + c) * g.h * g.w;
          const T* src = row + n * P;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            T* grow = plane + iy * g.w;
            const T* srow = src + oy * g.wo;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.w)) grow[ix] += srow[ox];
            }
          }
        }
      }
}

template <typename T>
void accumulate(const Tensor<T>& t, std::span<const T> g) {
  auto dst = t.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace

template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride, std::size_t pad) {
  require_rank4(x, "conv2d", "input");
  require_rank4(w, "conv2d", "weight");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                 stride,   pad,      0,        0};
  if (w.dim(1) != g.cin)
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " has " + std::to_string(g.cin) +
                     " channels but weight " + shape_str(w.shape()) + " expects " +
                     std::to_string(w.dim(1)));
  if (b.defined() && b.shape() != Shape{g.cout})
    throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  const auto span_h = static_cast<long>(g.h + 2 * pad) - static_cast<long>(g.kh);
  const auto span_w = static_cast<long>(g.w + 2 * pad) - static_cast<long>(g.kw);
  if (stride == 0 || span_h < 0 || span_w < 0)
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " with kernel " +
                     shape_str(w.shape()) + ", stride " + std::to_string(stride) + ", pad " +
                     std::to_string(pad) + " gives an empty output");
  g.ho = static_cast<std::size_t>(span_h) / stride + 1;
  g.wo = static_cast<std::size_t>(span_w) / stride + 1;

  const std::size_t K = g.k(), P = g.p(), cols = g.cols();
  auto col = std::make_shared<std::vector<T>>(K * cols);
  im2col(x.ptr(), g, col->data());

  RowMat<T> out_mat(g.cout, cols);
  out_mat.noalias() = CMapMat<T>(w.ptr(), g.cout, K) * CMapMat<T>(col->data(), K, cols);

  Tensor<T> y(Shape{g.n, g.cout, g.ho, g.wo});
  T* yp = y.ptr();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t co = 0; co < g.cout; ++co) {
      const T bias = b.defined() ? b[co] : T(0);
      const T* src = out_mat.data() + co * cols + n * P;
      T* dst = yp + (n * g.cout + co) * P;
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + bias;
    }

  if (should_record(tape, {&x, &w, &b})) {
    tape->record("conv2d", {&x, &w, &b}, y,
                 [x, w, b, g, col](std::span<const T> gy) mutable {
                   const std::size_t K = g.k(), P = g.p(), cols = g.cols();
                   RowMat<T> gmat(g.cout, cols);
                   for (std::size_t n = 0; n < g.n; ++n)
                     for (std::size_t co = 0; co < g.cout; ++co)
                       std::memcpy(gmat.data() + co * cols + n * P,
                                   gy.data() + (n * g.cout + co) * P, P * sizeof(T));
                   if (w.requires_grad()) {
                     MapMat<T> gw(w.grad_buffer().data(), g.cout, K);
                     gw.noalias() += gmat * CMapMat<T>(col->data(), K, cols).transpose();
                   }
                   if (b.defined() && b.requires_grad()) {
                     auto gb = b.grad_buffer();
                     for (std::size_t co = 0; co < g.cout; ++co) gb[co] += gmat.row(co).sum();
                   }
                   if (x.requires_grad()) {
                     RowMat<T> gcol(K, cols);
                     gcol.noalias() = CMapMat<T>(w.ptr(), g.cout, K).transpose() * gmat;
                     col2im_add(gcol.data(), g, x.grad_buffer().data());
                   }
                 });
  }
  return y;
}

template <typename T>
Tensor<T> batch_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BatchNormStats<T>& stats, Mode mode, T eps,
                     T momentum) {
  require_rank4(x, "batch_norm", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const std::size_t M = N * HW;
  if (M == 0) throw ShapeError("batch_norm: empty batch " + shape_str(x.shape()));
  if (!(eps > T(0))) throw std::invalid_argument("batch_norm: eps must be positive");
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    throw ShapeError("batch_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                     shape_str(beta.shape()) + " do not match input " + shape_str(x.shape()));
  if (stats.mean.size() != C || stats.var.size() != C)
    throw ShapeError("batch_norm: running statistics sized " + std::to_string(stats.mean.size()) +
                     " for " + std::to_string(C) + " channels");

  std::vector<T> mean(C), inv_std(C);
  if (mode == Mode::Train) {
    for (std::size_t c = 0; c < C; ++c) {
      T s = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.ptr() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const T mu = s / static_cast<T>(M);
      T v = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.ptr() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      const T var = v / static_cast<T>(M);
      mean[c] = mu;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = M > 1 ? v / static_cast<T>(M - 1) : var;
      stats.mean[c] = momentum * stats.mean[c] + (T(1) - momentum) * mu;
      stats.var[c] = momentum * stats.var[c] + (T(1) - momentum) * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = stats.mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.var[c] + eps);
    }
  }

  Tensor<T> y(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      const T* xp = x.ptr() + off;
      T* hp = xhat->data() + off;
      T* yp = y.ptr() + off;
      for (std::size_t i = 0; i < HW; ++i) {
        hp[i] = (xp[i] - mean[c]) * inv_std[c];
        yp[i] = gamma[c] * hp[i] + beta[c];
      }
    }

  if (should_record(tape, {&x, &gamma, &beta})) {
    tape->record(
        "batch_norm", {&x, &gamma, &beta}, y,
        [x, gamma, beta, xhat, inv_std, mode, N, C, HW, M](std::span<const T> gy) mutable {
          std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t off = (n * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i) {
                sum_g[c] += gy[off + i];
                sum_gx[c] += gy[off + i] * (*xhat)[off + i];
              }
            }
          if (gamma.requires_grad()) {
            auto gg = gamma.grad_buffer();
            for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
          }
          if (beta.requires_grad()) {
            auto gb = beta.grad_buffer();
            for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
          }
          if (!x.requires_grad()) return;
          auto gx = x.grad_buffer();
          const T inv_m = T(1) / static_cast<T>(M);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t off = (n * C + c) * HW;
              const T k = gamma[c] * inv_std[c];
              if (mode == Mode::Train) {
                const T mg = sum_g[c] * inv_m, mgx = sum_gx[c] * inv_m;
                for (std::size_t i = 0; i < HW; ++i)
                  gx[off + i] += k * (gy[off + i] - mg - (*xhat)[off + i] * mgx);
              } else {
                for (std::size_t i = 0; i < HW; ++i) gx[off + i] += k * gy[off + i];
              }
            }
        });
  }
  return y;
}

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T* xp = x.ptr();
  T* yp = y.ptr();
  for (std::size_t i = 0; i < x.numel(); ++i) yp[i] = xp[i] > T(0) ? xp[i] : T(0);
  if (should_record(tape, {&x})) {
    tape->record("relu", {&x}, y, [x](std::span<const T> gy) mutable {
      auto gx = x.grad_buffer();
      const T* xp = x.ptr();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (xp[i] > T(0)) gx[i] += gy[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> max_pool2(Tape<T>* tape, const Tensor<T>& x) {
  require_rank4(x, "max_pool2", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    throw ShapeError("max_pool2: spatial extent of " + shape_str(x.shape()) + " is odd");
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor<T> y(Shape{N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(y.numel());
  const T* xp = x.ptr();
  T* yp = y.ptr();
  for (std::size_t plane = 0; plane < N * C; ++plane)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const std::size_t base = plane * H * W + 2 * oy * W + 2 * ox;
        const std::size_t cand[4] = {base, base + 1, base + W, base + W + 1};
        std::size_t best = cand[0];
        for (std::size_t k = 1; k < 4; ++k)
          if (xp[cand[k]] > xp[best]) best = cand[k];
        const std::size_t o = plane * Ho * Wo + oy * Wo + ox;
        yp[o] = xp[best];
        (*argmax)[o] = best;
      }
  if (should_record(tape, {&x})) {
    tape->record("max_pool2", {&x}, y, [x, argmax](std::span<const T> gy) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t o = 0; o < gy.size(); ++o) gx[(*argmax)[o]] += gy[o];
    });
  }
  return y;
}

template <typename T>
Tensor<T> upsample_nearest2(Tape<T>* tape, const Tensor<T>& x) {
  require_rank4(x, "upsample_nearest2", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  Tensor<T> y(Shape{N, C, Ho, Wo});
  const T* xp = x.ptr();
  T* yp = y.ptr();
  for (std::size_t plane = 0; plane < N * C; ++plane)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox)
        yp[plane * Ho * Wo + oy * Wo + ox] = xp[plane * H * W + (oy / 2) * W + ox / 2];
  if (should_record(tape, {&x})) {
    tape->record("upsample_nearest2", {&x}, y,
                 [x, N, C, H, W](std::span<const T> gy) mutable {
                   auto gx = x.grad_buffer();
                   const std::size_t Ho = 2 * H, Wo = 2 * W;
                   for (std::size_t plane = 0; plane < N * C; ++plane)
                     for (std::size_t oy = 0; oy < Ho; ++oy)
                       for (std::size_t ox = 0; ox < Wo; ++ox)
                         gx[plane * H * W + (oy / 2) * W + ox / 2] +=
                             gy[plane * Ho * Wo + oy * Wo + ox];
                 });
  }
  return y;
}

template <typename T>
Tensor<T> concat_channels(Tape<T>* tape, std::span<const Tensor<T>> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& x : xs) require_rank4(x, "concat_channels", "input");
  if (xs.size() == 1) return xs[0];
  const std::size_t N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3), HW = H * W;
  std::size_t C = 0;
  for (const auto& x : xs) {
    if (x.dim(0) != N || x.dim(2) != H || x.dim(3) != W)
      throw ShapeError("concat_channels: " + shape_str(x.shape()) + " does not match " +
                       shape_str(xs[0].shape()) + " outside the channel axis");
    C += x.dim(1);
  }
  Tensor<T> y(Shape{N, C, H, W});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t ci = x.dim(1);
    for (std::size_t n = 0; n < N; ++n)
      std::memcpy(y.ptr() + (n * C + off) * HW, x.ptr() + n * ci * HW, ci * HW * sizeof(T));
    off += ci;
  }
  std::vector<const Tensor<T>*> inputs;
  bool needs = false;
  for (const auto& x : xs) {
    inputs.push_back(&x);
    needs = needs || x.requires_grad();
  }
  if (tape != nullptr && needs) {
    std::vector<Tensor<T>> parts(xs.begin(), xs.end());
    tape->record("concat_channels", inputs, y,
                 [parts, offsets, N, C, HW](std::span<const T> gy) mutable {
                   for (std::size_t k = 0; k < parts.size(); ++k) {
                     if (!parts[k].requires_grad()) continue;
                     auto gx = parts[k].grad_buffer();
                     const std::size_t ci = parts[k].dim(1);
                     for (std::size_t n = 0; n < N; ++n) {
                       const T* src = gy.data() + (n * C + offsets[k]) * HW;
                       T* dst = gx.data() + n * ci * HW;
                       for (std::size_t i = 0; i < ci * HW; ++i) dst[i] += src[i];
                     }
                   }
                 });
  }
  return y;
}

template <typename T>
Tensor<T> slice_channels(Tape<T>* tape, const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank4(x, "slice_channels", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (begin >= end || end > C)
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  const std::size_t ci = end - begin;
  Tensor<T> y(Shape{N, ci, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < N; ++n)
    std::memcpy(y.ptr() + n * ci * HW, x.ptr() + (n * C + begin) * HW, ci * HW * sizeof(T));
  if (should_record(tape, {&x})) {
    tape->record("slice_channels", {&x}, y, [x, N, C, HW, begin, ci](std::span<const T> gy) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < ci * HW; ++i) gx[(n * C + begin) * HW + i] += gy[n * ci * HW + i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y) {
  require_same_shape(x, y, "add");
  Tensor<T> z(x.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) z[i] = x[i] + y[i];
  if (should_record(tape, {&x, &y})) {
    tape->record("add", {&x, &y}, z, [x, y](std::span<const T> g) mutable {
      if (x.requires_grad()) accumulate(x, g);
      if (y.requires_grad()) accumulate(y, g);
    });
  }
  return z;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T factor) {
  Tensor<T> z(x.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) z[i] = factor * x[i];
  if (should_record(tape, {&x})) {
    tape->record("scale", {&x}, z, [x, factor](std::span<const T> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
    });
  }
  return z;
}

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x) {
  T s = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
  Tensor<T> z = Tensor<T>::scalar(s);
  if (should_record(tape, {&x})) {
    tape->record("sum", {&x}, z, [x](std::span<const T> g) mutable {
      auto gx = x.grad_buffer();
      for (auto& v : gx) v += g[0];
    });
  }
  return z;
}

template <typename T>
Tensor<T> mse_loss(Tape<T>* tape, const Tensor<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred, target, "mse_loss");
  if (target.requires_grad()) throw std::invalid_argument("mse_loss: target must not require grad");
  const std::size_t count = pred.numel();
  if (count == 0) throw ShapeError("mse_loss: empty input");
  T s = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const T d = pred[i] - target[i];
    s += d * d;
  }
  Tensor<T> z = Tensor<T>::scalar(s / static_cast<T>(count));
  if (should_record(tape, {&pred})) {
    tape->record("mse_loss", {&pred}, z, [pred, target, count](std::span<const T> g) mutable {
      auto gp = pred.grad_buffer();
      const T k = T(2) * g[0] / static_cast<T>(count);
      for (std::size_t i = 0; i < count; ++i) gp[i] += k * (pred[i] - target[i]);
    });
  }
  return z;
}

#define CUNET_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> conv2d(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                            std::size_t, std::size_t);                                        \
  template Tensor<T> batch_norm(Tape<T>*, const Tensor<T>&, const Tensor<T>&,               \
                                const Tensor<T>&, BatchNormStats<T>&, Mode, T, T);          \
  template Tensor<T> relu(Tape<T>*, const Tensor<T>&);                                      \
  template Tensor<T> max_pool2(Tape<T>*, const Tensor<T>&);                                 \
  template Tensor<T> upsample_nearest2(Tape<T>*, const Tensor<T>&);                         \
  template Tensor<T> concat_channels(Tape<T>*, std::span<const Tensor<T>>);                 \
  template Tensor<T> slice_channels(Tape<T>*, const Tensor<T>&, std::size_t, std::size_t);  \
  template Tensor<T> add(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> scale(Tape<T>*, const Tensor<T>&, T);                                  \
  template Tensor<T> sum(Tape<T>*, const Tensor<T>&);                                       \
  template Tensor<T> mse_loss(Tape<T>*, const Tensor<T>&, const Tensor<T>&);

CUNET_INSTANTIATE_OPS(float)
CUNET_INSTANTIATE_OPS(double)

}  // namespace cunet::ops

#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cunet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
class Tape;

// Dense row-major array with an optional gradient buffer.
//
// Tensor is a handle: copies share storage, so a parameter held by a store and
// the same parameter captured by a tape node see one gradient buffer. Use
// clone() or detach() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return s_ ? s_->data.size() : 0; }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  T* ptr() { return s_->data.data(); }
  const T* ptr() const { return s_->data.data(); }
  T item() const;
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return s_ && !s_->grad.empty(); }
  std::span<T> grad() { return s_->grad; }
  std::span<const T> grad() const { return s_->grad; }
  // Allocates a zero gradient on first use.
  std::span<T> grad_buffer() const;
  void zero_grad();
  void clear_grad();

  std::optional<std::size_t> node() const { return s_ ? s_->node : std::nullopt; }
  const void* tape_id() const { return s_ ? s_->tape : nullptr; }

  // Independent copy of the values; no gradient, no tape linkage.
  Tensor detach() const;
  // Independent copy that keeps the requires_grad flag.
  Tensor clone() const;
  Tensor reshaped(Shape shape) const;

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::optional<std::size_t> node;
    const void* tape = nullptr;
  };

  friend class Tape<T>;

  std::shared_ptr<Storage> s_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  std::vector<To> v(t.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(t[i]);
  Tensor<To> out(t.shape(), std::move(v));
  out.set_requires_grad(t.requires_grad());
  return out;
}

}  // namespace cunet

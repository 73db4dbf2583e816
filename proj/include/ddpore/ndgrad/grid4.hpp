#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ddpore/error.hpp"

namespace ddpore::ndgrad {

// (batch, channels, rows, cols). Every component is strictly positive.
struct Shape {
  std::int64_t n = 1;
  std::int64_t c = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  constexpr std::int64_t numel() const { return n * c * h * w; }
  constexpr std::int64_t plane() const { return h * w; }
  constexpr std::int64_t sample() const { return c * h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const;
  void validate() const;
};

// Shared handle to a dense NCHW array plus an optional gradient buffer.
//
// Copies of a Grid4 alias the same storage, the way tensor handles do in
// most frameworks. Use clone() for a deep copy. Forward ops never mutate
// their inputs, so handles can be read from several threads at once.
template <typename T>
class Grid4 {
 public:
  Grid4() = default;
  explicit Grid4(Shape shape, bool requires_grad = false);
  Grid4(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Grid4 scalar(T value, bool requires_grad = false);
  static Grid4 filled(Shape shape, T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::int64_t numel() const { return s_->shape.numel(); }

  std::span<const T> values() const { return s_->values; }
  std::span<T> mutable_values() { return s_->values; }
  const T* data() const { return s_->values.data(); }

  T at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;
  T item() const;

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }
  // Allocates a zero gradient on first use. Const because the gradient is
  // bookkeeping attached to the shared storage, not part of the value.
  std::span<T> mutable_grad() const;
  void zero_grad();
  void clear_grad() { std::vector<T>().swap(s_->grad); }

  bool same_storage(const Grid4& other) const { return s_ == other.s_; }
  Grid4 clone() const;

 private:
  struct Storage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

extern template class Grid4<float>;
extern template class Grid4<double>;

}  // namespace ddpore::ndgrad

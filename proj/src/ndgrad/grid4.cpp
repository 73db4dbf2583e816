#include "ddpore/ndgrad/grid4.hpp"

#include <algorithm>

namespace ddpore::ndgrad {

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) +
         "x" + std::to_string(w);
}

void Shape::validate() const {
  if (n <= 0 || c <= 0 || h <= 0 || w <= 0) {
    throw ShapeError("shape components must be positive, got " + str());
  }
}

template <typename T>
Grid4<T>::Grid4(Shape shape, bool requires_grad)
    : s_(std::make_shared<Storage>()) {
  shape.validate();
  s_->shape = shape;
  s_->values.assign(static_cast<std::size_t>(shape.numel()), T(0));
  s_->requires_grad = requires_grad;
}

template <typename T>
Grid4<T>::Grid4(Shape shape, std::vector<T> values, bool requires_grad)
    : s_(std::make_shared<Storage>()) {
  shape.validate();
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw ShapeError("Grid4 " + shape.str() + " needs " +
                     std::to_string(shape.numel()) + " values, got " +
                     std::to_string(values.size()));
  }
  s_->shape = shape;
  s_->values = std::move(values);
  s_->requires_grad = requires_grad;
}

template <typename T>
Grid4<T> Grid4<T>::scalar(T value, bool requires_grad) {
  return Grid4(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Grid4<T> Grid4<T>::filled(Shape shape, T value, bool requires_grad) {
  shape.validate();
  return Grid4(shape, std::vector<T>(static_cast<std::size_t>(shape.numel()), value),
               requires_grad);
}

template <typename T>
T Grid4<T>::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  const Shape& s = s_->shape;
  if (n < 0 || n >= s.n || c < 0 || c >= s.c || h < 0 || h >= s.h || w < 0 || w >= s.w) {
    throw BoundsError("index out of range for shape " + s.str());
  }
  return s_->values[static_cast<std::size_t>(((n * s.c + c) * s.h + h) * s.w + w)];
}

template <typename T>
T Grid4<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item() needs a single-element grid, got " + shape().str());
  }
  return s_->values[0];
}

template <typename T>
std::span<T> Grid4<T>::mutable_grad() const {
  if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
  return s_->grad;
}

template <typename T>
void Grid4<T>::zero_grad() {
  std::fill(s_->grad.begin(), s_->grad.end(), T(0));
}

template <typename T>
Grid4<T> Grid4<T>::clone() const {
  Grid4 out(s_->shape, s_->values, s_->requires_grad);
  out.s_->grad = s_->grad;
  return out;
}

template class Grid4<float>;
template class Grid4<double>;

}  // namespace ddpore::ndgrad

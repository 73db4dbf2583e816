#include "ddpore/ndgrad/tape.hpp"

namespace ddpore::ndgrad {

template <typename T>
std::vector<std::string> Tape<T>::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.push_back(e.op);
  return names;
}

template <typename T>
bool Tape<T>::tracks(std::initializer_list<const Grid4<T>*> inputs) const {
  if (!enabled_) return false;
  for (const auto* g : inputs) {
    if (g != nullptr && g->defined() && g->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void Tape<T>::record(std::string op, Grid4<T> output, BackwardFn fn) {
  output.set_requires_grad(true);
  entries_.push_back(Entry{std::move(op), std::move(output), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Grid4<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss");
  }
  for (auto& e : entries_) e.output.clear_grad();

  Grid4<T> seed = loss;
  seed.mutable_grad()[0] += T(1);

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    // Entries the loss does not depend on never received a gradient.
    if (!it->output.has_grad()) continue;
    it->fn();
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace ddpore::ndgrad

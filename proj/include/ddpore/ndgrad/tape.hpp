#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ddpore/ndgrad/grid4.hpp"

namespace ddpore::ndgrad {

// Linear record of the forward pass. Entries are appended in execution
// order, so replaying them back to front is a valid reverse topological
// order of the computation graph.
//
// A tape is single-owner: record from one thread only. A disabled tape
// records nothing, which is how inference runs.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  static Tape disabled() { return Tape(false); }

  bool enabled() const { return enabled_; }
  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> op_names() const;

  // True when an op over these inputs must be recorded.
  bool tracks(std::initializer_list<const Grid4<T>*> inputs) const;

  void record(std::string op, Grid4<T> output, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and runs every entry in reverse. Gradients of
  // intermediate results are rebuilt from scratch on each call; gradients of
  // leaves (parameters, inputs) accumulate until zeroed explicitly.
  void backward(const Grid4<T>& loss);

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::string op;
    Grid4<T> output;
    BackwardFn fn;
  };
  bool enabled_;
  std::vector<Entry> entries_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace ddpore::ndgrad

#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ddpore/ndgrad/grid4.hpp"

namespace ddpore::ndgrad {

// Pore branch (the image-to-image network) vs the domain classifier head.
enum class ParamGroup { pore, domain };

std::string_view to_string(ParamGroup group);
ParamGroup parse_param_group(std::string_view text);

template <typename T>
struct NamedParam {
  std::string name;
  ParamGroup group;
  Grid4<T> value;
};

// Insertion-ordered map from parameter path ("conv2.0.conv_a.weight") to a
// trainable grid. Names are unique and each entry lives in exactly one group.
template <typename T>
class ParamSet {
 public:
  // Registers a parameter and marks it as requiring grad.
  Grid4<T>& add(std::string name, ParamGroup group, Grid4<T> value);

  bool contains(std::string_view name) const;
  const Grid4<T>& get(std::string_view name) const;
  Grid4<T>& get(std::string_view name);
  ParamGroup group_of(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  std::int64_t count_values() const;
  std::vector<std::string> names() const;
  std::vector<std::string> names(ParamGroup group) const;

  const std::vector<NamedParam<T>>& entries() const { return entries_; }
  std::vector<NamedParam<T>>& entries() { return entries_; }

  void zero_grad();

  // Deep copy: new storage with the same values and no gradients.
  ParamSet clone() const;

 private:
  std::size_t index_of(std::string_view name) const;

  std::vector<NamedParam<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

extern template class ParamSet<float>;
extern template class ParamSet<double>;

}  // namespace ddpore::ndgrad

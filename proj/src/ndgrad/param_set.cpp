#include "ddpore/ndgrad/param_set.hpp"

namespace ddpore::ndgrad {

std::string_view to_string(ParamGroup group) {
  return group == ParamGroup::pore ? "pore" : "domain";
}

ParamGroup parse_param_group(std::string_view text) {
  if (text == "pore") return ParamGroup::pore;
  if (text == "domain") return ParamGroup::domain;
  throw FormatError("unknown parameter group '" + std::string(text) + "'");
}

template <typename T>
Grid4<T>& ParamSet<T>::add(std::string name, ParamGroup group, Grid4<T> value) {
  if (index_.contains(name)) {
    throw ConfigError("duplicate parameter name '" + name + "'");
  }
  value.set_requires_grad(true);
  index_.emplace(name, entries_.size());
  entries_.push_back(NamedParam<T>{std::move(name), group, std::move(value)});
  return entries_.back().value;
}

template <typename T>
std::size_t ParamSet<T>::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) {
    throw ConfigError("unknown parameter '" + std::string(name) + "'");
  }
  return it->second;
}

template <typename T>
bool ParamSet<T>::contains(std::string_view name) const {
  return index_.contains(std::string(name));
}

template <typename T>
const Grid4<T>& ParamSet<T>::get(std::string_view name) const {
  return entries_[index_of(name)].value;
}

template <typename T>
Grid4<T>& ParamSet<T>::get(std::string_view name) {
  return entries_[index_of(name)].value;
}

template <typename T>
ParamGroup ParamSet<T>::group_of(std::string_view name) const {
  return entries_[index_of(name)].group;
}

template <typename T>
std::int64_t ParamSet<T>::count_values() const {
  std::int64_t total = 0;
  for (const auto& e : entries_) total += e.value.numel();
  return total;
}

template <typename T>
std::vector<std::string> ParamSet<T>::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

template <typename T>
std::vector<std::string> ParamSet<T>::names(ParamGroup group) const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (e.group == group) out.push_back(e.name);
  }
  return out;
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

template <typename T>
ParamSet<T> ParamSet<T>::clone() const {
  ParamSet out;
  for (const auto& e : entries_) {
    Grid4<T> copy(e.value.shape(),
                  std::vector<T>(e.value.values().begin(), e.value.values().end()));
    out.add(e.name, e.group, std::move(copy));
  }
  return out;
}

template class ParamSet<float>;
template class ParamSet<double>;

}  // namespace ddpore::ndgrad

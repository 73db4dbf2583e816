#pragma once

#include <set>
#include <string>

#include "ddpore/error.hpp"
#include "json.hpp"

namespace ddpore {

// Reads optional fields from a JSON object into existing defaults and
// rejects keys nobody asked for. Type errors become ConfigError naming the
// field.
class JsonFields {
 public:
  JsonFields(const nlohmann::ordered_json& j, std::string context)
      : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(context_ + " must be a JSON object");
  }

  template <typename T>
  JsonFields& get(const std::string& key, T& out) {
    known_.insert(key);
    if (j_.contains(key)) {
      try {
        j_.at(key).get_to(out);
      } catch (const nlohmann::ordered_json::exception& e) {
        throw ConfigError(context_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!known_.contains(key)) throw ConfigError(context_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const nlohmann::ordered_json& j_;
  std::string context_;
  std::set<std::string> known_;
};

}  // namespace ddpore

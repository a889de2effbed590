#pragma once

#include <initializer_list>
#include <string>

#include "json.hpp"
#include "ucaps/tensor.hpp"

namespace ucaps {
namespace detail {

using nlohmann::json;

/// Rejects unknown keys so config typos fail loudly.
inline void require_keys(const json& obj, std::initializer_list<const char*> allowed,
                         const std::string& ctx) {
  if (!obj.is_object()) throw ValidationError(ctx + ": expected a JSON object");
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* key : allowed)
      if (item.key() == key) {
        known = true;
        break;
      }
    if (!known) throw ValidationError(ctx + ": unknown key '" + item.key() + "'");
  }
}

template <typename T>
std::vector<T> get_vector(const json& obj, const char* key, std::vector<T> fallback) {
  if (!obj.contains(key)) return fallback;
  return obj.at(key).get<std::vector<T>>();
}

}  // namespace detail
}  // namespace ucaps

#pragma once

#include <initializer_list>
#include <string>

#include "json.hpp"

#include "lesionforge/tensor.hpp"

namespace lesionforge {

// Rejects keys outside `allowed` so misspelled settings never fall back to
// defaults silently.
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& section) {
  if (!j.is_object()) throw Error("bad_config", section + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw Error("unknown_key", "unknown key '" + key + "' in " + section);
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace lesionforge

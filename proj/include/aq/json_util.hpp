#pragma once

#include <initializer_list>
#include <set>
#include <string>

#include "json.hpp"

#include "aq/error.hpp"

namespace aq {

using Json = nlohmann::json;

/// Unknown keys are configuration errors: a misspelt hyper-parameter must not
/// silently fall back to its default.
inline void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!ok.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

template <class T>
T json_get(const Json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw ConfigError(where + ": missing key '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

template <class T>
T json_get_or(const Json& j, const char* key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    return json_get<T>(j, key, where);
}

}  // namespace aq

#pragma once

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include <set>
#include <string>

#include "drgrade/errors.hpp"

namespace drgrade::detail {

inline void check_keys(const YAML::Node& node, const std::set<std::string>& allowed, const char* section) {
  if (!node.IsMap()) throw ConfigError(fmt::format("{}: expected a mapping", section));
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) throw ConfigError(fmt::format("{}: unknown key '{}'", section, key));
  }
}

template <typename T>
T get(const YAML::Node& node, const char* key, T fallback, const char* section) {
  if (!node[key]) return fallback;
  try {
    return node[key].as<T>();
  } catch (const YAML::Exception& e) {
    throw ConfigError(fmt::format("{}.{}: {}", section, key, e.what()));
  }
}

}  // namespace drgrade::detail

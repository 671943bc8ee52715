// Copyright 2026 The condcomp Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef CONDCOMP_SPEC_JSON_HPP_
#define CONDCOMP_SPEC_JSON_HPP_

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "condcomp/tensor.hpp"

namespace condcomp {

using Json = nlohmann::json;

/// Validation failure in a user-supplied configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require_object(const Json& j, std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
}

/// Rejects keys outside `allowed` so typos fail loudly.
inline void check_keys(const Json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  require_object(j, where);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw ConfigError(std::string(where) + ": unknown key '" + it.key() + "'");
    }
  }
}

template <class T>
void read_field(const Json& j, const char* key, T& out, std::string_view where) {
  if (!j.contains(key)) return;
  if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    const Json& v = j.at(key);
    const bool ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    if (!ok) throw ConfigError(std::string(where) + "." + key + ": expected a nonnegative integer");
  }
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string(where) + "." + key + ": wrong type");
  }
}

}  // namespace detail

}  // namespace condcomp

#endif  // CONDCOMP_SPEC_JSON_HPP_

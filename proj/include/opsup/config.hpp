#pragma once

// Canonical JSON and the SHA-256 config hash that names runs and guards
// checkpoints.

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "opsup/errors.hpp"

namespace opsup {

using Json = nlohmann::json;

/// Sorted keys (nlohmann objects are ordered maps), no whitespace.
inline std::string canonical_json(const Json& j) { return j.dump(); }

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed", 4);
  }
  std::string hex;
  hex.reserve(2 * len);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

inline std::string config_hash(const Json& config) { return sha256_hex(canonical_json(config)); }

/// Config documents are strict: every key of object `j` must be listed.
inline void require_known_keys(const Json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& item : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
      std::string valid;
      for (auto a : allowed) valid += (valid.empty() ? "" : ", ") + std::string(a);
      throw ConfigError("unknown key '" + item.key() + "' in " + where + " (valid: " + valid + ")");
    }
  }
}

/// Overwrites `out` with j[key] when present; type mismatches become ConfigError.
template <class T>
void read_key(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace opsup

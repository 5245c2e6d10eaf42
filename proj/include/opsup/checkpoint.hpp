#pragma once

// Checkpoint layout: "OPD1", u64 little-endian manifest length, manifest
// JSON (UTF-8), then every parameter as little-endian f64 in manifest order.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "opsup/models.hpp"

namespace opsup {

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline Json checkpoint_manifest(const ModelHandle& h) {
  Json params = Json::array();
  const auto& ps = h.params();
  for (std::size_t i = 0; i < ps.size(); ++i) params.push_back({{"name", ps.names()[i]}, {"shape", ps.tensors()[i].shape()}});
  const Json cfg = h.config();
  return Json{{"kind", to_string(h.kind())},
              {"seed", h.seed()},
              {"config", cfg},
              {"config_hash", config_hash(cfg)},
              {"output_affine", {{"offset", h.affine().offset}, {"scale", h.affine().scale}}},
              {"params", params}};
}

inline std::string checkpoint_bytes(const ModelHandle& h) {
  const std::string manifest = canonical_json(checkpoint_manifest(h));
  std::string out = "OPD1";
  detail::put_u64_le(out, manifest.size());
  out += manifest;
  for (double v : h.params().flat()) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline void save_checkpoint(const ModelHandle& h, const std::filesystem::path& path) {
  const std::string bytes = checkpoint_bytes(h);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Rebuilds the model and verifies the manifest: magic, stored config hash
/// against the stored config (and `expected_hash` when given), parameter
/// names, shapes and byte count.
inline ModelHandle load_checkpoint(const std::filesystem::path& path,
                                   const std::optional<std::string>& expected_hash = std::nullopt) {
  const std::string bytes = read_file_bytes(path);
  const std::string where = "checkpoint " + path.string();
  if (bytes.size() < 12 || bytes.compare(0, 4, "OPD1") != 0) throw LoadError(where + ": bad magic");
  const std::uint64_t len = detail::get_u64_le(bytes, 4);
  if (len > bytes.size() - 12) throw LoadError(where + ": truncated manifest");
  Json manifest;
  try {
    manifest = Json::parse(bytes.substr(12, len));
  } catch (const Json::exception& e) {
    throw LoadError(where + ": manifest is not valid JSON (" + e.what() + ")");
  }
  ModelHandle h;
  try {
    const Json& cfg = manifest.at("config");
    const std::string stored = manifest.at("config_hash");
    if (config_hash(cfg) != stored) throw LoadError(where + ": config hash mismatch (manifest altered)");
    if (expected_hash && *expected_hash != stored) {
      throw LoadError(where + ": config hash " + stored + " does not match expected " + *expected_hash);
    }
    h = init_params(model_kind_from_string(manifest.at("kind")), manifest.at("seed").get<std::uint64_t>(), cfg);
    h.set_affine({manifest.at("output_affine").at("offset"), manifest.at("output_affine").at("scale")});
    const Json& plist = manifest.at("params");
    const auto& ps = h.params();
    if (plist.size() != ps.size()) throw LoadError(where + ": parameter count differs from the architecture");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (plist[i].at("name") != ps.names()[i] || plist[i].at("shape").get<Shape>() != ps.tensors()[i].shape()) {
        throw LoadError(where + ": parameter " + std::to_string(i) + " does not match the architecture");
      }
    }
  } catch (const Json::exception& e) {
    throw LoadError(where + ": malformed manifest (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw LoadError(where + ": " + e.what());
  }
  const std::size_t n = h.params().numel();
  if (bytes.size() != 12 + len + 8 * n) throw LoadError(where + ": parameter payload has the wrong size");
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = std::bit_cast<double>(detail::get_u64_le(bytes, 12 + len + 8 * i));
  h.params().load_flat(values);
  return h;
}

}  // namespace opsup

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dyndepth/tensor_math.hpp"

namespace dyndepth {

inline constexpr int kCheckpointFormatVersion = 1;

/// Named tensors plus string key/value configuration. On disk this is a text
/// manifest and a flat little-endian float64 blob next to it.
struct Checkpoint {
  std::map<std::string, std::string> config;
  std::vector<std::pair<std::string, Matrix>> tensors;

  void put(const std::string& name, const Matrix& m) { tensors.emplace_back(name, m); }
  const Matrix& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::string& setting(const std::string& key) const;
};

/// Writes `<dir>/checkpoint.manifest` and `<dir>/checkpoint.bin`.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace dyndepth

#include "dyndepth/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace dyndepth {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order, which must be little-endian");

namespace fs = std::filesystem;

const Matrix& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw InputError("checkpoint: no tensor named '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return true;
  }
  return false;
}

const std::string& Checkpoint::setting(const std::string& key) const {
  const auto it = config.find(key);
  if (it == config.end()) throw InputError("checkpoint: missing config key '" + key + "'");
  return it->second;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

  std::ofstream manifest(dir / "checkpoint.manifest");
  std::ofstream blob(dir / "checkpoint.bin", std::ios::binary);
  if (!manifest || !blob) throw IoError("cannot write checkpoint in " + dir.string());

  manifest << "format_version " << kCheckpointFormatVersion << "\n";
  for (const auto& [key, value] : ckpt.config) {
    if (key.find_first_of(" \n") != std::string::npos || value.find('\n') != std::string::npos) {
      throw InputError("checkpoint: config key/value may not contain whitespace/newlines: " + key);
    }
    manifest << "config " << key << " " << value << "\n";
  }
  std::int64_t offset = 0;
  for (const auto& [name, m] : ckpt.tensors) {
    manifest << "tensor " << name << " " << m.rows() << " " << m.cols() << " " << offset << "\n";
    blob.write(reinterpret_cast<const char*>(m.data()),
               static_cast<std::streamsize>(m.size() * sizeof(double)));
    offset += m.size();
  }
  if (!manifest || !blob) throw IoError("short write while saving checkpoint in " + dir.string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "checkpoint.manifest";
  const fs::path bpath = dir / "checkpoint.bin";
  std::ifstream manifest(mpath);
  if (!manifest) throw IoError("cannot open " + mpath.string());
  std::ifstream blob(bpath, std::ios::binary);
  if (!blob) throw IoError("cannot open " + bpath.string());

  Checkpoint ckpt;
  std::string line;
  bool versioned = false;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream in(line);
    std::string kind;
    in >> kind;
    if (kind == "format_version") {
      int version = 0;
      in >> version;
      if (version != kCheckpointFormatVersion) {
        throw VersionError("checkpoint " + mpath.string() + " has format_version " +
                           std::to_string(version) + ", expected " +
                           std::to_string(kCheckpointFormatVersion));
      }
      versioned = true;
    } else if (kind == "config") {
      std::string key, value;
      in >> key;
      std::getline(in >> std::ws, value);
      ckpt.config[key] = value;
    } else if (kind == "tensor") {
      std::string name;
      Index rows = 0, cols = 0;
      std::int64_t offset = 0;
      if (!(in >> name >> rows >> cols >> offset) || rows < 0 || cols < 0) {
        throw IoError("malformed tensor line in " + mpath.string() + ": " + line);
      }
      Matrix m(rows, cols);
      blob.seekg(static_cast<std::streamoff>(offset * sizeof(double)));
      blob.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(m.size() * sizeof(double)));
      if (!blob) throw IoError("truncated blob " + bpath.string() + " at tensor " + name);
      ckpt.tensors.emplace_back(name, std::move(m));
    } else {
      throw IoError("unknown manifest entry in " + mpath.string() + ": " + line);
    }
  }
  if (!versioned) throw VersionError("checkpoint " + mpath.string() + " has no format_version");
  return ckpt;
}

}  // namespace dyndepth

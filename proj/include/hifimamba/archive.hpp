/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "hifimamba/nn.hpp"
#include "hifimamba/tensor.hpp"

/// Single-file container of named float64 tensors plus a JSON metadata block.
///
/// Layout (little-endian host order):
///   8 bytes  magic "HIFIARC1"
///   8 bytes  uint64 header length N
///   N bytes  JSON {"meta": {...}, "tensors": [{"name","shape","offset","count"}],
///                  "checksum": "<fnv1a64 hex of blob>"}
///   blob     concatenated raw doubles, offsets in elements
namespace hifi::archive {

inline constexpr char kMagic[8] = {'H', 'I', 'F', 'I', 'A', 'R', 'C', '1'};

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  const Tensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CorruptFile("archive has no tensor '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

inline std::uint64_t blob_checksum(const std::string& blob) { return nn::fnv1a64(blob); }

inline std::string serialize(const Archive& a) {
  std::string blob;
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : a.tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    blob.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
    offset += t.size();
  }
  nlohmann::json header{{"meta", a.meta}, {"tensors", entries}, {"checksum", hex64(blob_checksum(blob))}};
  const std::string hs = header.dump();
  const std::uint64_t n = hs.size();
  std::string out(kMagic, sizeof(kMagic));
  out.append(reinterpret_cast<const char*>(&n), sizeof(n));
  out += hs;
  out += blob;
  return out;
}

inline Archive deserialize(const std::string& bytes, const std::string& origin = "<memory>") {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw CorruptFile(origin + ": not an archive (bad magic)");
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data() + 8, sizeof(n));
  if (16 + n > bytes.size()) throw CorruptFile(origin + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, n));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(origin + ": header is not JSON: " + e.what());
  }
  const std::string blob = bytes.substr(16 + n);
  if (header.value("checksum", "") != hex64(blob_checksum(blob))) throw CorruptFile(origin + ": checksum mismatch");
  Archive a;
  a.meta = header.value("meta", nlohmann::json::object());
  for (const auto& e : header.at("tensors")) {
    const auto offset = e.at("offset").get<std::size_t>(), count = e.at("count").get<std::size_t>();
    if ((offset + count) * sizeof(double) > blob.size()) throw CorruptFile(origin + ": tensor extends past blob");
    Shape shape = e.at("shape").get<Shape>();
    if (shape_numel(shape) != count) throw CorruptFile(origin + ": shape/count disagree");
    std::vector<double> data(count);
    std::memcpy(data.data(), blob.data() + offset * sizeof(double), count * sizeof(double));
    a.tensors.emplace(e.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
  }
  return a;
}

/// Writes through a temporary file and renames it into place.
inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingDataset("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void save(const Archive& a, const std::filesystem::path& path) { write_atomic(path, serialize(a)); }
inline Archive load(const std::filesystem::path& path) { return deserialize(read_file(path), path.string()); }

}  // namespace hifi::archive

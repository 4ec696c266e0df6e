#pragma once

// Checkpoint archive: "CTRN1" magic, the model config as JSON, the fixed
// classifier adjacency, then every named parameter and batch-norm buffer as
// shape + 64-bit little-endian values. Loading reconstructs the model and
// reproduces eval-mode outputs bitwise.

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrn/common.hpp"
#include "ctrn/model.hpp"

namespace ctrn {

namespace detail {

inline void ck_put_u32(std::ostream& out, std::uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 4);
}

inline void ck_put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

inline void ck_put_f64(std::ostream& out, double v) {
  ck_put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline std::uint32_t ck_get_u32(std::istream& in, const std::string& path) {
  char bytes[4];
  if (!in.read(bytes, 4)) {
    throw FormatError("checkpoint '" + path + "': truncated");
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  }
  return v;
}

inline std::uint64_t ck_get_u64(std::istream& in, const std::string& path) {
  char bytes[8];
  if (!in.read(bytes, 8)) {
    throw FormatError("checkpoint '" + path + "': truncated");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  }
  return v;
}

inline double ck_get_f64(std::istream& in, const std::string& path) {
  return std::bit_cast<double>(ck_get_u64(in, path));
}

inline void ck_put_entry(std::ostream& out, const std::string& name,
                         const std::vector<std::size_t>& shape,
                         const double* values, std::size_t n) {
  ck_put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  ck_put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) ck_put_u64(out, e);
  for (std::size_t i = 0; i < n; ++i) ck_put_f64(out, values[i]);
}

struct CheckpointEntry {
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

}  // namespace detail

template <class T>
void save_checkpoint(CtrnModel<T>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open '" + path + "'");
  out.write("CTRN1", 5);
  const std::string config = ctrn_config_to_json(model.config()).dump();
  detail::ck_put_u64(out, config.size());
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  const auto& adjacency = model.adjacency();
  detail::ck_put_u64(out, model.config().C);
  for (double v : adjacency) detail::ck_put_f64(out, v);

  std::uint64_t entries = model.parameters().size();
  auto buffers = model.buffers();
  entries += buffers.size();
  detail::ck_put_u64(out, entries);
  std::vector<double> widened;
  for (const auto& [name, p] : model.parameters()) {
    widened.assign(p.values().begin(), p.values().end());
    detail::ck_put_entry(out, name, p.shape(), widened.data(), widened.size());
  }
  for (const auto& [name, buf] : buffers) {
    widened.assign(buf->begin(), buf->end());
    detail::ck_put_entry(out, name, {buf->size()}, widened.data(),
                         widened.size());
  }
  if (!out) throw IoError("save_checkpoint: write failed for '" + path + "'");
}

template <class T>
CtrnModel<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open '" + path + "'");
  char magic[5];
  if (!in.read(magic, 5) || std::string(magic, 5) != "CTRN1") {
    throw FormatError("checkpoint '" + path + "': bad magic");
  }
  const std::uint64_t config_len = detail::ck_get_u64(in, path);
  std::string config_text(config_len, '\0');
  if (!in.read(config_text.data(), static_cast<std::streamsize>(config_len))) {
    throw FormatError("checkpoint '" + path + "': truncated config");
  }
  CtrnConfig config;
  try {
    config = ctrn_config_from_json(nlohmann::json::parse(config_text));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint '" + path + "': bad config JSON: " + e.what());
  }
  const std::uint64_t C = detail::ck_get_u64(in, path);
  if (C != config.C) {
    throw FormatError("checkpoint '" + path + "': adjacency size disagrees with config");
  }
  std::vector<double> adjacency(C * C);
  for (auto& v : adjacency) v = detail::ck_get_f64(in, path);

  CtrnModel<T> model(config, adjacency, /*seed=*/0);

  const std::uint64_t entries = detail::ck_get_u64(in, path);
  std::map<std::string, detail::CheckpointEntry> table;
  for (std::uint64_t e = 0; e < entries; ++e) {
    const std::uint32_t name_len = detail::ck_get_u32(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) {
      throw FormatError("checkpoint '" + path + "': truncated entry name");
    }
    detail::CheckpointEntry entry;
    const std::uint32_t rank = detail::ck_get_u32(in, path);
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      entry.shape.push_back(static_cast<std::size_t>(detail::ck_get_u64(in, path)));
      n *= entry.shape.back();
    }
    entry.values.resize(n);
    for (auto& v : entry.values) v = detail::ck_get_f64(in, path);
    table.emplace(std::move(name), std::move(entry));
  }

  for (auto& [name, p] : model.parameters()) {
    auto it = table.find(name);
    if (it == table.end()) {
      throw FormatError("checkpoint '" + path + "': missing parameter '" +
                        name + "'");
    }
    if (it->second.shape != p.shape()) {
      throw FormatError("checkpoint '" + path + "': shape mismatch for '" +
                        name + "'");
    }
    auto& vals = p.values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      vals[i] = static_cast<T>(it->second.values[i]);
    }
    table.erase(it);
  }
  for (auto& [name, buf] : model.buffers()) {
    auto it = table.find(name);
    if (it == table.end()) {
      throw FormatError("checkpoint '" + path + "': missing buffer '" + name +
                        "'");
    }
    if (it->second.values.size() != buf->size()) {
      throw FormatError("checkpoint '" + path + "': size mismatch for '" +
                        name + "'");
    }
    for (std::size_t i = 0; i < buf->size(); ++i) {
      (*buf)[i] = static_cast<T>(it->second.values[i]);
    }
    table.erase(it);
  }
  if (!table.empty()) {
    throw FormatError("checkpoint '" + path + "': unexpected entry '" +
                      table.begin()->first + "'");
  }
  return model;
}

}  // namespace ctrn

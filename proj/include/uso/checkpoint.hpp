#pragma once

// Named-tensor container.
//
// Layout (all integers little-endian):
//   8 bytes   magic "USOCKPT1"
//   u64       header length L
//   L bytes   JSON header: {"meta": {...}, "tensors": [{"name", "rows", "cols", "offset"}]}
//   payload   float64 values, row-major, concatenated in header order;
//             "offset" counts values (not bytes) from the payload start.

#include "uso/autograd.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

namespace uso {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Matrix> tensors;

  static constexpr char kMagic[9] = "USOCKPT1";

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    nlohmann::json header;
    header["meta"] = meta;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, m] : tensors) {
      header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
      offset += static_cast<std::uint64_t>(m.size());
    }
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kMagic, 8);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : tensors) {
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("short write on " + path.string());
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("bad checkpoint magic in " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error("truncated checkpoint header in " + path.string());
    const auto header = nlohmann::json::parse(text);
    Checkpoint ck;
    ck.meta = header.at("meta");
    for (const auto& t : header.at("tensors")) {
      Matrix m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
      in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
      if (!in) throw std::runtime_error("truncated checkpoint payload in " + path.string());
      ck.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
    }
    return ck;
  }

  void put(const ag::ParameterSet& ps) {
    for (const auto& p : ps) tensors[p->name] = p->value;
  }

  /// Copies stored tensors into matching parameters. Every parameter must be
  /// present with the same shape.
  void restore(ag::ParameterSet& ps) const {
    for (auto& p : ps) {
      auto it = tensors.find(p->name);
      if (it == tensors.end()) throw std::runtime_error("checkpoint is missing tensor " + p->name);
      if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
        throw std::runtime_error("checkpoint shape mismatch for " + p->name);
      }
      p->value = it->second;
    }
  }
};

/// FNV-1a over the raw bytes of a tensor; used for freeze-policy checks.
inline std::uint64_t tensor_hash(const Matrix& m) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
  const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(double);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  h ^= static_cast<std::uint64_t>(m.rows()) * 0x9E3779B97F4A7C15ULL;
  return h;
}

inline std::map<std::string, std::uint64_t> parameter_hashes(const ag::ParameterSet& ps) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& p : ps) out[p->name] = tensor_hash(p->value);
  return out;
}

}  // namespace uso

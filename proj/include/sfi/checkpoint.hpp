#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sfi/io.hpp"
#include "sfi/mat.hpp"

namespace sfi {

/// Binary parameter snapshot. Layout: magic "SFIC", version u32, count
/// u32, then per matrix {name_len u32, name utf-8, rows u32, cols u32,
/// row-major f64} — all little-endian — followed by a trailer {step u32,
/// config_len u32, config utf-8} carrying the training step and the
/// resolved-config echo. Round-trips bitwise.
struct Checkpoint {
  std::uint32_t version = 1;
  std::vector<std::pair<std::string, Mat>> entries;
  std::uint32_t step = 0;
  std::string config_echo;

  std::string serialize() const {
    std::string out = "SFIC";
    append_u32(out, version);
    append_u32(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, m] : entries) {
      append_u32(out, static_cast<std::uint32_t>(name.size()));
      out += name;
      append_u32(out, static_cast<std::uint32_t>(m.rows()));
      append_u32(out, static_cast<std::uint32_t>(m.cols()));
      for (double v : m.raw()) append_f64(out, v);
    }
    append_u32(out, step);
    append_u32(out, static_cast<std::uint32_t>(config_echo.size()));
    out += config_echo;
    return out;
  }

  static Checkpoint deserialize(const std::string& bytes) {
    std::size_t pos = 0;
    auto need = [&](std::size_t k) {
      if (pos + k > bytes.size()) throw std::runtime_error("checkpoint: truncated file");
    };
    need(4);
    if (bytes.compare(0, 4, "SFIC") != 0) throw std::runtime_error("checkpoint: bad magic");
    pos = 4;
    Checkpoint ck;
    ck.version = read_u32(bytes, pos, need);
    const std::uint32_t count = read_u32(bytes, pos, need);
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t name_len = read_u32(bytes, pos, need);
      need(name_len);
      std::string name = bytes.substr(pos, name_len);
      pos += name_len;
      const std::uint32_t rows = read_u32(bytes, pos, need);
      const std::uint32_t cols = read_u32(bytes, pos, need);
      need(static_cast<std::size_t>(rows) * cols * 8);
      Mat m(rows, cols);
      for (double& v : m.raw()) {
        std::uint64_t u = 0;
        for (int b = 0; b < 8; ++b)
          u |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + b])) << (8 * b);
        pos += 8;
        v = std::bit_cast<double>(u);
      }
      ck.entries.emplace_back(std::move(name), std::move(m));
    }
    if (pos < bytes.size()) {
      ck.step = read_u32(bytes, pos, need);
      const std::uint32_t clen = read_u32(bytes, pos, need);
      need(clen);
      ck.config_echo = bytes.substr(pos, clen);
      pos += clen;
    }
    return ck;
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

  static Checkpoint load(const std::filesystem::path& path) {
    return deserialize(read_file(path));
  }

 private:
  static void append_u32(std::string& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out += static_cast<char>((v >> (8 * b)) & 0xff);
  }
  static void append_f64(std::string& out, double d) {
    const std::uint64_t v = std::bit_cast<std::uint64_t>(d);
    for (int b = 0; b < 8; ++b) out += static_cast<char>((v >> (8 * b)) & 0xff);
  }
  template <class Need>
  static std::uint32_t read_u32(const std::string& bytes, std::size_t& pos, Need&& need) {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + b])) << (8 * b);
    pos += 4;
    return v;
  }
};

/// Snapshot any visit()-able parameter struct.
template <class ParamsT>
Checkpoint make_checkpoint(const ParamsT& params, std::uint32_t step, std::string config_echo) {
  Checkpoint ck;
  ck.step = step;
  ck.config_echo = std::move(config_echo);
  const_cast<ParamsT&>(params).visit(
      [&](const std::string& name, Mat& m) { ck.entries.emplace_back(name, m); });
  return ck;
}

}  // namespace sfi

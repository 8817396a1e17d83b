#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "sfi/mat.hpp"

namespace sfi {

/// Shortest exact decimal for a double: %.17g round-trips bit-exactly.
inline std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Matrix CSV: first line "rows,cols", then one comma-separated row per
/// line at full 17-significant-digit precision.
inline std::string mat_to_csv(const Mat& m) {
  std::string out = std::to_string(m.rows()) + "," + std::to_string(m.cols()) + "\n";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) out += ',';
      out += fmt_full(m(i, j));
    }
    out += '\n';
  }
  return out;
}

/// Parses the matrix CSV format. Blank lines and lines starting with '#'
/// are ignored.
inline Mat mat_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto next_line = [&](std::string& dst) {
    while (std::getline(in, dst)) {
      if (!dst.empty() && dst.back() == '\r') dst.pop_back();
      if (dst.empty() || dst[0] == '#') continue;
      return true;
    }
    return false;
  };
  if (!next_line(line)) throw std::runtime_error("mat_from_csv: empty input");
  std::size_t rows = 0, cols = 0;
  if (std::sscanf(line.c_str(), "%zu,%zu", &rows, &cols) != 2)
    throw std::runtime_error("mat_from_csv: bad header line '" + line + "'");
  Mat m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!next_line(line)) throw std::runtime_error("mat_from_csv: missing row " + std::to_string(i));
    std::istringstream ls(line);
    std::string cell;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::getline(ls, cell, ','))
        throw std::runtime_error("mat_from_csv: row " + std::to_string(i) + " too short");
      std::size_t pos = 0;
      m(i, j) = std::stod(cell, &pos);
    }
  }
  return m;
}

/// Writes via temp file + rename so readers never observe partial output.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_mat_csv(const std::filesystem::path& path, const Mat& m) {
  write_file_atomic(path, mat_to_csv(m));
}

inline Mat load_mat_csv(const std::filesystem::path& path) {
  return mat_from_csv(read_file(path));
}

}  // namespace sfi

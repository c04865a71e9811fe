#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "melon/error.hpp"

// Minimal reader/writer for the unquoted comma-separated files used here.
namespace melon::csv {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto comma = line.find(',', pos);
    out.push_back(trim(line.substr(pos, comma == std::string_view::npos ? line.npos : comma - pos)));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

inline double parse_double(std::string_view cell, std::string_view column, std::size_t row) {
  double v = 0.0;
  const char* end = cell.data() + cell.size();
  auto [p, ec] = std::from_chars(cell.data(), end, v);
  if (cell.empty() || ec != std::errc() || p != end) {
    throw ParseError("non-numeric value '" + std::string(cell) + "' in column " + std::string(column), row);
  }
  if (!std::isfinite(v)) {
    throw ParseError("non-finite value '" + std::string(cell) + "' in column " + std::string(column), row);
  }
  return v;
}

inline long parse_int(std::string_view cell, std::string_view column, std::size_t row) {
  long v = 0;
  const char* end = cell.data() + cell.size();
  auto [p, ec] = std::from_chars(cell.data(), end, v);
  if (cell.empty() || ec != std::errc() || p != end) {
    throw ParseError("non-integer value '" + std::string(cell) + "' in column " + std::string(column), row);
  }
  return v;
}

// Shortest text that parses back to the same double.
inline void append_double(std::string& out, double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, p);
}

// Iterates data rows of a file whose first line must equal `header`.
// Row numbers are 1-based file lines, so the first data row is row 2.
class Reader {
 public:
  Reader(const std::filesystem::path& path, std::string_view header) : path_(path), in_(path) {
    if (!in_) throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in_, line)) throw DataError(path.string() + ": empty file, expected header");
    if (trim(line) != header) {
      throw ParseError(path.string() + ": expected header '" + std::string(header) + "', got '" +
                           std::string(trim(line)) + "'",
                       1);
    }
    row_ = 1;
  }

  // Returns false at end of file. Blank lines are skipped.
  bool next(std::vector<std::string_view>& cells, std::size_t expected) {
    while (std::getline(in_, line_)) {
      ++row_;
      if (trim(line_).empty()) continue;
      cells = split(line_);
      if (cells.size() != expected) {
        throw ParseError(path_.string() + ": expected " + std::to_string(expected) + " fields, got " +
                             std::to_string(cells.size()),
                         row_);
      }
      return true;
    }
    return false;
  }

  std::size_t row() const { return row_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::string line_;
  std::size_t row_ = 0;
};

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

}  // namespace melon::csv

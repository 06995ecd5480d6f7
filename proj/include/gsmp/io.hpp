#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gsmp::io {

/// 17 significant digits: round-trips every double, byte-stable across runs.
inline std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return std::string(buf);
}

/// Minimal RFC-4180 table with LF endings. Fields produced by this project
/// never contain separators or quotes, so no quoting is emitted.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add_row(std::vector<std::string> row) { rows.push_back(std::move(row)); }

  /// Canonical row order: lexicographic over the joined fields. Applied
  /// before writing so thread count cannot change the bytes.
  void sort_rows() {
    std::sort(rows.begin(), rows.end());
  }

  std::string to_string() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) os << ',';
      os << header[i];
    }
    os << '\n';
    for (const auto& row : rows) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (i) os << ',';
        os << row[i];
      }
      os << '\n';
    }
    return os.str();
  }
};

inline CsvTable read_csv(const std::string& text) {
  CsvTable table;
  std::istringstream is(text);
  std::string line;
  bool first = true;
  const auto split = [](const std::string& s) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream fs(s);
    while (std::getline(fs, field, ',')) fields.push_back(field);
    if (!s.empty() && s.back() == ',') fields.push_back("");
    return fields;
  };
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      table.header = split(line);
      first = false;
    } else {
      table.rows.push_back(split(line));
    }
  }
  return table;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

}  // namespace gsmp::io

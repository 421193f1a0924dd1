#pragma once

// CSV writing/parsing with RFC-4180 quoting (commas, quotes, newlines).

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgen::csv {

inline std::string escape(const std::string& field) {
  if (field.find_first_of("\n\r") != std::string::npos)
    throw std::invalid_argument("csv: newlines in fields are not supported");
  if (field.find_first_of(",\"") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

inline std::string join_row(const std::vector<std::string>& fields) {
  std::string out;
  for (size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += escape(fields[i]);
  }
  return out;
}

inline std::vector<std::string> parse_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c == '\r') {
      // tolerate CRLF
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw std::invalid_argument("csv: missing column " + name);
  }
};

inline void write_file(const std::string& path, const Table& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("csv: cannot open for write: " + path);
  f << join_row(t.header) << "\n";
  for (const auto& r : t.rows) f << join_row(r) << "\n";
  if (!f) throw std::runtime_error("csv: write failed: " + path);
}

inline Table read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("csv: cannot open for read: " + path);
  Table t;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty() && f.eof()) break;
    auto row = parse_row(line);
    if (first) {
      t.header = std::move(row);
      first = false;
    } else {
      if (row.size() != t.header.size())
        throw std::runtime_error("csv: ragged row in " + path);
      t.rows.push_back(std::move(row));
    }
  }
  if (first) throw std::runtime_error("csv: empty file " + path);
  return t;
}

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << std::fixed << v;
  return ss.str();
}

}  // namespace sgen::csv

/* Copyright 2026 The dlperf Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Minimal delimited-text reader/writer with a header row.

#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dlperf/error.hpp"

namespace dlperf {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column position by name, or npos.
  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    return npos;
  }

  std::size_t require_column(std::string_view name) const {
    const auto c = column(name);
    require(c != npos, ErrorCode::kSchema, "missing column '" + std::string(name) + "'");
    return c;
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  out.push_back(std::move(field));
  return out;
}

inline std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace detail

inline CsvTable parse_csv(std::string_view text) {
  CsvTable table;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto line = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto fields = detail::split_csv_line(line);
    if (table.header.empty()) {
      table.header = std::move(fields);
      continue;
    }
    require(fields.size() == table.header.size(), ErrorCode::kSchema,
            "line " + std::to_string(line_no) + ": expected " +
                std::to_string(table.header.size()) + " fields, got " +
                std::to_string(fields.size()));
    table.rows.push_back(std::move(fields));
  }
  require(!table.header.empty(), ErrorCode::kSchema, "empty delimited file");
  return table;
}

inline std::string format_csv(const CsvTable& table) {
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) os << ',';
      os << detail::quote_csv(row[i]);
    }
    os << '\n';
  };
  emit(table.header);
  for (const auto& r : table.rows) emit(r);
  return os.str();
}

/// Shortest text that round-trips the double exactly.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto res = std::from_chars(first, last, v);
  require(res.ec == std::errc() && res.ptr == last, ErrorCode::kSchema,
          where + ": '" + s + "' is not a number");
  return v;
}

inline std::int64_t parse_int(const std::string& s, const std::string& where) {
  std::int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  require(res.ec == std::errc() && res.ptr == s.data() + s.size(), ErrorCode::kSchema,
          where + ": '" + s + "' is not an integer");
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIo, "cannot write '" + path + "'");
  out << content;
  require(out.good(), ErrorCode::kIo, "write failed for '" + path + "'");
}

}  // namespace dlperf

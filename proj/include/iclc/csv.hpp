#pragma once

// Small schema-checked CSV writer. Numbers are printed with %.9g so reruns are
// byte-identical.

#include "iclc/errors.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace iclc {

enum class ColumnType { integer, real, text };

struct Column {
  std::string name;
  ColumnType type = ColumnType::real;
  bool nullable = false;  // empty cell allowed (undefined metric)
};

inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

using Cell = std::variant<std::monostate, long long, double, std::string>;

inline Cell cell(int v) { return static_cast<long long>(v); }
inline Cell cell(long v) { return static_cast<long long>(v); }
inline Cell cell(long long v) { return v; }
inline Cell cell(std::size_t v) { return static_cast<long long>(v); }
inline Cell cell(double v) { return v; }
inline Cell cell(const std::string& v) { return v; }
inline Cell cell(const char* v) { return std::string(v); }
inline Cell cell(const std::optional<double>& v) { return v ? Cell(*v) : Cell(std::monostate{}); }

class CsvTable {
 public:
  explicit CsvTable(std::vector<Column> schema) : schema_(std::move(schema)) {
    if (schema_.empty()) throw ArgumentError("csv schema needs at least one column");
  }

  const std::vector<Column>& schema() const { return schema_; }
  std::size_t rows() const { return rows_.size(); }
  const std::vector<std::vector<Cell>>& data() const { return rows_; }

  void add(std::vector<Cell> row) { rows_.push_back(std::move(row)); }

  // Throws on column count, type or nullability violations, naming the row and column.
  void validate() const {
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      const auto& row = rows_[r];
      if (row.size() != schema_.size()) {
        throw ArgumentError("csv row " + std::to_string(r) + " has " + std::to_string(row.size()) + " cells, schema has " +
                            std::to_string(schema_.size()));
      }
      for (std::size_t c = 0; c < row.size(); ++c) {
        const Column& col = schema_[c];
        const Cell& v = row[c];
        auto fail = [&](const std::string& why) {
          throw ArgumentError("csv row " + std::to_string(r) + ", column " + col.name + ": " + why);
        };
        if (std::holds_alternative<std::monostate>(v)) {
          if (!col.nullable) fail("empty cell in non-nullable column");
          continue;
        }
        switch (col.type) {
          case ColumnType::integer:
            if (!std::holds_alternative<long long>(v)) fail("expected integer");
            break;
          case ColumnType::real:
            if (!std::holds_alternative<double>(v) && !std::holds_alternative<long long>(v)) fail("expected number");
            break;
          case ColumnType::text:
            if (!std::holds_alternative<std::string>(v)) fail("expected text");
            break;
        }
      }
    }
  }

  std::string str() const {
    validate();
    std::string out;
    for (std::size_t c = 0; c < schema_.size(); ++c) {
      if (c) out += ',';
      out += schema_[c].name;
    }
    out += '\n';
    for (const auto& row : rows_) {
      for (std::size_t c = 0; c < row.size(); ++c) {
        if (c) out += ',';
        out += render(row[c]);
      }
      out += '\n';
    }
    return out;
  }

  void write(const std::string& path) const {
    const std::string s = str();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path);
    f << s;
    if (!f) throw Error("write failed: " + path);
  }

 private:
  static std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) {
      if (ch == '"') q += '"';
      q += ch;
    }
    return q + "\"";
  }

  static std::string render(const Cell& v) {
    if (std::holds_alternative<long long>(v)) return std::to_string(std::get<long long>(v));
    if (std::holds_alternative<double>(v)) return format_real(std::get<double>(v));
    if (std::holds_alternative<std::string>(v)) return quote(std::get<std::string>(v));
    return "";
  }

  std::vector<Column> schema_;
  std::vector<std::vector<Cell>> rows_;
};

}  // namespace iclc

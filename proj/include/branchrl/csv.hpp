#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "branchrl/util.hpp"

namespace branchrl {

/// CSV writer with the repo-wide conventions: comma separated, one header
/// row, LF line endings, UTF-8, deterministic float formatting.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& columns,
            const std::vector<std::string>& comment_lines = {})
      : out_(path, std::ios::binary), n_cols_(columns.size()) {
    if (!out_) throw std::runtime_error("cannot open for writing: " + path.string());
    for (const auto& c : comment_lines) out_ << "# " << c << "\n";
    write_raw_row(columns);
  }

  void write_row(const std::vector<std::string>& cells) {
    if (cells.size() != n_cols_)
      throw std::invalid_argument("csv row width mismatch");
    write_raw_row(cells);
  }

  void flush() { out_.flush(); }

 private:
  void write_raw_row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

  std::ofstream out_;
  std::size_t n_cols_;
};

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  int column_index(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return static_cast<int>(i);
    return -1;
  }

  std::vector<double> numeric_column(const std::string& name) const {
    const int idx = column_index(name);
    if (idx < 0) throw std::invalid_argument("csv: no column named " + name);
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(std::stod(r[static_cast<std::size_t>(idx)]));
    return out;
  }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  CsvTable table;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (!have_header) {
      table.columns = std::move(cells);
      have_header = true;
    } else {
      if (cells.size() != table.columns.size())
        throw std::runtime_error("csv: ragged row in " + path.string());
      table.rows.push_back(std::move(cells));
    }
  }
  if (!have_header) throw std::runtime_error("csv: no header row in " + path.string());
  return table;
}

}  // namespace branchrl

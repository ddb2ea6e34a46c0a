#pragma once

// CSV tables with a provenance header. Every table starts with '#' comment
// lines carrying the config checksum and the seeds used, then a plain CSV body.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "crowdtemp/data.hpp"
#include "crowdtemp/errors.hpp"

namespace crowdtemp {

struct Table {
  std::string name;  // file stem under tables/
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  Table& add(std::vector<std::string> row) {
    require(row.size() == columns.size(), "table " + name + ": row width does not match header");
    rows.push_back(std::move(row));
    return *this;
  }
};

inline std::string cell(double v) { return detail::format_double(v); }
inline std::string cell(std::size_t v) { return std::to_string(v); }
inline std::string cell(const std::string& v) { return v; }
inline std::string cell(const char* v) { return v; }

struct Provenance {
  std::string stage;
  std::uint64_t config_checksum = 0;
  std::map<std::string, std::uint64_t> seeds;  // ordered, so headers are stable
};

inline void write_table(std::ostream& out, const Table& t, const Provenance& p) {
  out << "# stage=" << p.stage << '\n';
  out << "# config_checksum=" << hex64(p.config_checksum) << '\n';
  for (const auto& [k, v] : p.seeds) out << "# seed." << k << '=' << v << '\n';
  for (std::size_t c = 0; c < t.columns.size(); ++c) out << (c ? "," : "") << t.columns[c];
  out << '\n';
  for (const auto& r : t.rows) {
    for (std::size_t c = 0; c < r.size(); ++c) out << (c ? "," : "") << r[c];
    out << '\n';
  }
}

inline void save_table(const std::filesystem::path& dir, const Table& t, const Provenance& p) {
  std::filesystem::create_directories(dir);
  const auto path = dir / (t.name + ".csv");
  std::ofstream out(path);
  if (!out) throw ParseError(path.string() + ": cannot open for writing");
  write_table(out, t, p);
}

struct ParsedTable {
  std::map<std::string, std::string> header;  // "# key=value" lines
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw ParseError("table has no column " + name);
  }
};

inline ParsedTable load_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": cannot open table");
  ParsedTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos) t.header[detail::trim(line.substr(1, eq - 1))] = line.substr(eq + 1);
      continue;
    }
    auto cells = detail::split_commas(line);
    if (t.columns.empty())
      t.columns = std::move(cells);
    else
      t.rows.push_back(std::move(cells));
  }
  if (t.columns.empty()) throw ParseError(path.string() + ": empty table");
  return t;
}

}  // namespace crowdtemp

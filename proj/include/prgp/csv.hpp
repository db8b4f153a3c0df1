#ifndef PRGP_CSV_HPP
#define PRGP_CSV_HPP

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "prgp/errors.hpp"

namespace prgp {

/// Minimal CSV helpers for the plain, unquoted files this project exchanges.

inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline CsvTable csv_read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open CSV file: " + path);
  CsvTable table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = csv_split(line);
    if (first) {
      table.header = std::move(fields);
      first = false;
    } else {
      if (fields.size() != table.header.size())
        throw ConfigError("ragged CSV row in " + path + ": " + line);
      table.rows.push_back(std::move(fields));
    }
  }
  if (first) throw ConfigError("empty CSV file: " + path);
  return table;
}

inline double csv_to_double(const std::string& s,
                            const std::string& context = "CSV field") {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse number '" + s + "' in " + context);
  }
}

}  // namespace prgp

#endif  // PRGP_CSV_HPP

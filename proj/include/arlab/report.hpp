#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "arlab/random.hpp"

namespace arlab {

// Raised for unreadable/unwritable files and refused overwrites.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shortest round-trip representation; infinities as inf/-inf.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_number(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("not a number: " + s);
  return v;
}

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  explicit Table(std::vector<std::string> cols = {}) : columns(std::move(cols)) {}

  void add(std::vector<std::string> row) {
    if (row.size() != columns.size()) throw std::invalid_argument("table row has wrong width");
    rows.push_back(std::move(row));
  }

  std::size_t column(const std::string& name) const {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw std::out_of_range("no column " + name);
    return static_cast<std::size_t>(it - columns.begin());
  }
};

inline std::string config_hash(const nlohmann::json& config) {
  const std::uint64_t h = fnv1a(config.dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// First line: "# " + JSON object with the report kind, full config echo and
// its hash. Then a CSV header and rows.
inline std::string render_csv(const std::string& kind, const nlohmann::json& config, const Table& table) {
  nlohmann::json head = {{"kind", kind}, {"config_hash", config_hash(config)}, {"config", config}};
  std::ostringstream os;
  os << "# " << head.dump() << '\n';
  for (std::size_t i = 0; i < table.columns.size(); ++i) os << (i ? "," : "") << table.columns[i];
  os << '\n';
  for (const auto& r : table.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
    os << '\n';
  }
  return os.str();
}

struct ParsedCsv {
  nlohmann::json header;
  Table table;
};

inline ParsedCsv parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  ParsedCsv out;
  auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(l);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!l.empty() && l.back() == ',') cells.emplace_back();
    return cells;
  };
  bool have_columns = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (!have_columns && line.rfind("# ", 0) == 0) {
      out.header = nlohmann::json::parse(line.substr(2));
      continue;
    }
    if (!have_columns) {
      out.table.columns = split(line);
      have_columns = true;
    } else {
      out.table.add(split(line));
    }
  }
  return out;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Writes `text`, creating parent directories. An existing file is only
// replaced when `force` is set.
inline void write_text(const std::filesystem::path& path, const std::string& text, bool force) {
  std::error_code ec;
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  if (std::filesystem::exists(path) && !force) {
    throw IoError("refusing to overwrite " + path.string() + " (use --force)");
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

// Line plot of y_col against x_col, one polyline per distinct value of
// series_col (empty: a single series). Pure function of the table.
inline std::string render_svg(const Table& table, const std::string& x_col, const std::string& y_col,
                              const std::string& series_col = "", const std::string& title = "") {
  const std::size_t xi = table.column(x_col), yi = table.column(y_col);
  const std::size_t si = series_col.empty() ? 0 : table.column(series_col);
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& r : table.rows) {
    const double x = parse_number(r[xi]), y = parse_number(r[yi]);
    if (!std::isfinite(x) || !std::isfinite(y)) continue;
    series[series_col.empty() ? y_col : r[si]].emplace_back(x, y);
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
    y0 = std::min(y0, y);
    y1 = std::max(y1, y);
  }
  if (series.empty()) {
    x0 = y0 = 0;
    x1 = y1 = 1;
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double w = 640, h = 400, ml = 60, mr = 140, mt = 30, mb = 40;
  auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (w - ml - mr); };
  auto py = [&](double y) { return h - mb - (y - y0) / (y1 - y0) * (h - mt - mb); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << ml << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << ml << "\" y=\"" << h - 10 << "\" font-size=\"11\">" << x_col << " " << format_number(x0)
     << " .. " << format_number(x1) << "</text>\n";
  os << "<text x=\"4\" y=\"" << mt + 10 << "\" font-size=\"11\">" << format_number(y1) << "</text>\n";
  os << "<text x=\"4\" y=\"" << h - mb << "\" font-size=\"11\">" << format_number(y0) << "</text>\n";
  std::size_t k = 0;
  for (const auto& [name, pts] : series) {
    const char* c = colors[k % 8];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) os << px(x) << ',' << py(y) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << w - mr + 8 << "\" y=\"" << mt + 14 * (k + 1) << "\" font-size=\"11\" fill=\"" << c << "\">"
       << name << "</text>\n";
    ++k;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace arlab

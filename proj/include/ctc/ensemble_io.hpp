#pragma once

// Trajectory CSV: header `subject,t,W,Y,Z1..Zr` (or `W1..Wq` when q > 1), one
// row per subject and grid time, sorted by subject then t. Every subject must
// carry the same time column. Numbers are written in shortest round-trip form.

#include <charconv>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "ctc/grid_paths.hpp"

namespace ctc {

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(std::string_view cell, std::size_t row, std::size_t col) {
  double v = 0.0;
  const auto* first = cell.data();
  const auto* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || cell.empty() || !std::isfinite(v))
    throw ParseError("non-numeric cell '" + std::string(cell) + "'", row, col);
  return v;
}

inline std::int64_t parse_id(std::string_view cell, std::size_t row) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty())
    throw ParseError("non-numeric subject id '" + std::string(cell) + "'", row, 1);
  return v;
}

inline void append_number(std::string& out, double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, ptr);
}

struct CsvLayout {
  std::size_t q = 0;
  std::size_t covariates = 0;
};

inline CsvLayout parse_header(std::string_view line) {
  const auto cells = split_commas(line);
  if (cells.size() < 4 || cells[0] != "subject" || cells[1] != "t")
    throw ParseError("missing header 'subject,t,W,Y[,Z1..]'", 1, 0);
  CsvLayout layout;
  std::size_t c = 2;
  if (cells[c] == "W") {
    layout.q = 1;
    ++c;
  } else {
    while (c < cells.size() && cells[c] == "W" + std::to_string(layout.q + 1)) {
      ++layout.q;
      ++c;
    }
  }
  if (layout.q == 0) throw ParseError("header lacks treatment column W", 1, c + 1);
  if (c >= cells.size() || cells[c] != "Y") throw ParseError("header lacks outcome column Y", 1, c + 1);
  ++c;
  for (; c < cells.size(); ++c) {
    if (cells[c] != "Z" + std::to_string(layout.covariates + 1))
      throw ParseError("unexpected header column '" + std::string(cells[c]) + "'", 1, c + 1);
    ++layout.covariates;
  }
  return layout;
}

}  // namespace detail

inline std::string csv_header(std::size_t q, std::size_t covariates) {
  std::string h = "subject,t";
  if (q == 1) {
    h += ",W";
  } else {
    for (std::size_t j = 1; j <= q; ++j) h += ",W" + std::to_string(j);
  }
  h += ",Y";
  for (std::size_t j = 1; j <= covariates; ++j) h += ",Z" + std::to_string(j);
  return h;
}

/// Parses the trajectory CSV. Errors name the offending row and column.
inline Ensemble read_ensemble(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header", 1, 0);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto layout = detail::parse_header(line);
  const std::size_t width = 3 + layout.q + layout.covariates;

  struct Block {
    std::int64_t id;
    std::size_t first_row;
    std::vector<double> t, w, y, z;
  };
  std::vector<Block> blocks;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_commas(line);
    if (cells.size() != width)
      throw ParseError("ragged row: expected " + std::to_string(width) + " cells, got " + std::to_string(cells.size()),
                       row, 0);
    const auto id = detail::parse_id(cells[0], row);
    if (blocks.empty() || blocks.back().id != id) {
      if (!blocks.empty() && id < blocks.back().id) throw ParseError("rows not sorted by subject", row, 1);
      blocks.push_back(Block{id, row, {}, {}, {}, {}});
    }
    Block& b = blocks.back();
    const double t = detail::parse_double(cells[1], row, 2);
    if (!b.t.empty() && !(t > b.t.back())) throw ParseError("non-increasing time", row, 2);
    b.t.push_back(t);
    std::size_t c = 2;
    for (std::size_t j = 0; j < layout.q; ++j, ++c) b.w.push_back(detail::parse_double(cells[c], row, c + 1));
    b.y.push_back(detail::parse_double(cells[c], row, c + 1));
    ++c;
    for (std::size_t j = 0; j < layout.covariates; ++j, ++c)
      b.z.push_back(detail::parse_double(cells[c], row, c + 1));
  }
  if (blocks.empty()) throw ParseError("no data rows", row, 0);

  GridPtr grid;
  try {
    grid = std::make_shared<const TimeGrid>(blocks.front().t);
  } catch (const ValidationError& e) {
    throw ParseError(std::string("invalid time grid: ") + e.what(), blocks.front().first_row, 2);
  }
  std::vector<SubjectTrajectory> subjects;
  subjects.reserve(blocks.size());
  for (auto& b : blocks) {
    if (b.t != blocks.front().t) throw ParseError("grid mismatch for subject " + std::to_string(b.id), b.first_row, 2);
    SubjectTrajectory s;
    s.id = b.id;
    s.w = SampledPath(grid, layout.q, std::move(b.w));
    s.y = SampledPath(grid, 1, std::move(b.y));
    if (layout.covariates > 0) s.z = SampledPath(grid, layout.covariates, std::move(b.z));
    subjects.push_back(std::move(s));
  }
  return Ensemble(grid, std::move(subjects), EnsembleMeta{0, "csv"});
}

inline void write_ensemble(const Ensemble& ensemble, std::ostream& out) {
  const std::size_t q = ensemble.treatment_dim();
  const std::size_t r = ensemble.covariate_dim();
  std::string buf = csv_header(q, r);
  buf += '\n';
  const TimeGrid& grid = *ensemble.grid();
  for (const auto& s : ensemble.subjects()) {
    const std::string id = std::to_string(s.id);
    for (std::size_t k = 0; k < grid.size(); ++k) {
      buf += id;
      buf += ',';
      detail::append_number(buf, grid[k]);
      for (std::size_t j = 0; j < q; ++j) {
        buf += ',';
        detail::append_number(buf, s.w(k, j));
      }
      buf += ',';
      detail::append_number(buf, s.y(k));
      for (std::size_t j = 0; j < r; ++j) {
        buf += ',';
        detail::append_number(buf, s.z(k, j));
      }
      buf += '\n';
    }
    if (buf.size() > (1u << 20)) {
      out << buf;
      buf.clear();
    }
  }
  out << buf;
  if (!out) throw IoError("failed writing trajectory CSV");
}

}  // namespace ctc

#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "interfx/em.hpp"
#include "interfx/panel_data.hpp"
#include "interfx/simulation.hpp"

namespace interfx {
namespace io {

inline std::string fmt(double v, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = (b == std::string::npos) ? std::string() : s.substr(b, e - b + 1);
  }
  return out;
}

inline bool parse_double(const std::string& s, double& v) {
  if (s.empty()) return false;
  char* end = nullptr;
  v = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

inline double parse_field(const std::string& s, int line_no, const char* what) {
  double v;
  if (!parse_double(s, v))
    throw DataError(std::string("line ") + std::to_string(line_no) +
                    ": cannot parse " + what + " from '" + s + "'");
  return v;
}

}  // namespace detail

// Long-format panel: one row per (unit, period) with columns
// unit,time,y,x1,...,xK. A header row is detected and skipped. Units and
// periods must form a complete balanced grid.
inline PanelDataset read_panel_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open panel file: " + path);
  std::string line;
  int line_no = 0;
  struct Row {
    double unit, time;
    std::vector<double> vals;
    int line_no;
  };
  std::vector<Row> rows;
  int ncols = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto fields = detail::split_csv(line);
    if (fields.size() == 1 && fields[0].empty()) continue;
    double probe;
    if (rows.empty() && ncols == -1 && !detail::parse_double(fields[0], probe)) {
      ncols = static_cast<int>(fields.size());  // header row
      continue;
    }
    if (ncols == -1) ncols = static_cast<int>(fields.size());
    if (static_cast<int>(fields.size()) != ncols)
      throw DataError("line " + std::to_string(line_no) + ": expected " +
                      std::to_string(ncols) + " fields, got " +
                      std::to_string(fields.size()));
    if (ncols < 3)
      throw DataError("line " + std::to_string(line_no) +
                      ": need at least unit,time,y columns");
    Row r;
    r.line_no = line_no;
    r.unit = detail::parse_field(fields[0], line_no, "unit");
    r.time = detail::parse_field(fields[1], line_no, "time");
    for (int j = 2; j < ncols; ++j) {
      const double v = detail::parse_field(
          fields[j], line_no, j == 2 ? "y" : ("x" + std::to_string(j - 2)).c_str());
      if (!std::isfinite(v))
        throw DataError("line " + std::to_string(line_no) + ": non-finite value");
      r.vals.push_back(v);
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw DataError("panel file has no data rows: " + path);

  std::vector<double> units, times;
  for (const auto& r : rows) {
    units.push_back(r.unit);
    times.push_back(r.time);
  }
  std::sort(units.begin(), units.end());
  units.erase(std::unique(units.begin(), units.end()), units.end());
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());

  const int n = static_cast<int>(units.size());
  const int t = static_cast<int>(times.size());
  const int k = static_cast<int>(rows.front().vals.size()) - 1;
  if (static_cast<long long>(n) * t != static_cast<long long>(rows.size()))
    throw DataError("unbalanced panel: " + std::to_string(rows.size()) + " rows but " +
                    std::to_string(n) + " units x " + std::to_string(t) + " periods");

  std::map<double, int> uidx, tidx;
  for (int i = 0; i < n; ++i) uidx[units[i]] = i;
  for (int s = 0; s < t; ++s) tidx[times[s]] = s;

  PanelDataset data;
  data.n_units = n;
  data.n_periods = t;
  data.n_regressors = k;
  data.y.resize(n, t);
  data.x.assign(k, MatrixXd(n, t));
  std::vector<char> seen(static_cast<size_t>(n) * t, 0);
  for (const auto& r : rows) {
    const int i = uidx[r.unit], s = tidx[r.time];
    char& flag = seen[static_cast<size_t>(i) * t + s];
    if (flag)
      throw DataError("line " + std::to_string(r.line_no) + ": duplicate (unit, time) pair");
    flag = 1;
    data.y(i, s) = r.vals[0];
    for (int j = 0; j < k; ++j) data.x[j](i, s) = r.vals[j + 1];
  }
  return data;
}

inline void write_panel_csv(const PanelDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write panel file: " + path);
  out << "unit,time,y";
  for (int j = 0; j < data.n_regressors; ++j) out << ",x" << (j + 1);
  out << "\n";
  for (int i = 0; i < data.n_units; ++i)
    for (int s = 0; s < data.n_periods; ++s) {
      out << (i + 1) << "," << (s + 1) << "," << fmt(data.y(i, s));
      for (int j = 0; j < data.n_regressors; ++j) out << "," << fmt(data.x[j](i, s));
      out << "\n";
    }
}

// Side file keyed by unit (or period) label in the first column; one row per
// unit (per period), any number of value columns.
inline MatrixXd read_keyed_csv(const std::string& path, int n_keys, const char* what) {
  std::ifstream in(path);
  if (!in) throw DataError(std::string("cannot open ") + what + " file: " + path);
  std::string line;
  int line_no = 0;
  std::vector<std::pair<double, std::vector<double>>> rows;
  int ncols = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto fields = detail::split_csv(line);
    if (fields.size() == 1 && fields[0].empty()) continue;
    double probe;
    if (rows.empty() && ncols == -1 && !detail::parse_double(fields[0], probe)) {
      ncols = static_cast<int>(fields.size());
      continue;
    }
    if (ncols == -1) ncols = static_cast<int>(fields.size());
    if (static_cast<int>(fields.size()) != ncols || ncols < 2)
      throw DataError("line " + std::to_string(line_no) + ": malformed " + what + " row");
    std::vector<double> vals;
    const double key = detail::parse_field(fields[0], line_no, "key");
    for (int j = 1; j < ncols; ++j)
      vals.push_back(detail::parse_field(fields[j], line_no, what));
    rows.emplace_back(key, std::move(vals));
  }
  if (static_cast<int>(rows.size()) != n_keys)
    throw DataError(std::string(what) + " file has " + std::to_string(rows.size()) +
                    " rows, expected " + std::to_string(n_keys));
  std::sort(rows.begin(), rows.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  MatrixXd m(n_keys, static_cast<int>(rows.front().second.size()));
  for (int i = 0; i < n_keys; ++i)
    for (int j = 0; j < m.cols(); ++j) m(i, j) = rows[i].second[j];
  return m;
}

struct EstimateReportInfo {
  std::string model = "basic";
  std::string panel_path;
  int r = 0, r1 = 0, r2 = 0;
  bool auto_r = false;
  std::vector<double> ic_trace;
};

inline void write_estimate_report(std::ostream& out, const FitResult& fit,
                                  const EstimateReportInfo& info) {
  out << "# interfx estimate report\n";
  out << "model = " << info.model << "\n";
  if (!info.panel_path.empty()) out << "panel = " << info.panel_path << "\n";
  const Theta& th = fit.theta_hat;
  out << "n_units = " << th.n_units() << "\n";
  out << "n_regressors = " << th.n_regressors() << "\n";
  out << "r = " << info.r << "\n";
  if (info.model != "basic") out << "r1 = " << info.r1 << "\nr2 = " << info.r2 << "\n";
  if (info.auto_r) {
    out << "r_selection = auto\n";
    out << "ic_trace =";
    for (size_t i = 0; i < info.ic_trace.size(); ++i)
      out << (i ? "," : " ") << fmt(info.ic_trace[i], "%.10g");
    out << "\n";
  }
  out << "converged = " << (fit.converged ? "true" : "false") << "\n";
  out << "n_iters = " << fit.n_iters << "\n";
  if (!fit.loglik_trace.empty())
    out << "loglik = " << fmt(fit.loglik_trace.back(), "%.12g") << "\n";
  out << "foc_residual = " << fmt(fit.foc_residual, "%.6g") << "\n";
  for (const auto& d : fit.diagnostics) out << "# note: " << d << "\n";
  out << "coef,beta_hat,se\n";
  for (int j = 0; j < th.beta.size(); ++j) {
    out << "x" << (j + 1) << "," << fmt(th.beta(j), "%.12g") << ",";
    out << (fit.se_beta.size() > j ? fmt(fit.se_beta(j), "%.12g") : "nan") << "\n";
  }
}

inline void write_mc_report(std::ostream& out, const McReport& rep,
                            const std::string& estimators = "wg,pc,mle") {
  out << "# interfx simulation report\n";
  out << "design = " << rep.design << "\n";
  out << "n_reps = " << rep.n_reps << "\n";
  out << "seed = " << rep.seed << "\n";
  out << "estimators = " << estimators << "\n";
  out << "select_r = " << (rep.selection ? "on" : "off") << "\n";
  out << "n_failed = " << rep.n_failed << "\n";
  for (const auto& f : rep.failures) out << "# failed: " << f << "\n";

  std::vector<std::string> order;
  for (const char* name : {"wg", "pc", "mle"})
    if (rep.cells.count(name)) order.push_back(name);

  out << "N,T,pct_r_correct";
  for (const auto& name : order)
    for (int c = 1; c <= 2; ++c)
      out << "," << name << "_b" << c << "_bias," << name << "_b" << c << "_rmse";
  out << "\n";
  out << rep.n << "," << rep.t << ",";
  out << (std::isnan(rep.pct_r_correct) ? std::string("na")
                                        : fmt(rep.pct_r_correct, "%.1f"));
  for (const auto& name : order) {
    const auto& cells = rep.cells.at(name);
    for (int c = 0; c < 2; ++c)
      out << "," << fmt(cells[c].bias, "%.6f") << "," << fmt(cells[c].rmse, "%.6f");
  }
  out << "\n";
}

}  // namespace io
}  // namespace interfx

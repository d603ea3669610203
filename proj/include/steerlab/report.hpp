#pragma once

// CSV, JSON and SVG output for experiment results. All output is a pure
// function of the result, so identical results give identical bytes.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "steerlab/harness.hpp"
#include "steerlab/json_io.hpp"
#include "steerlab/lens.hpp"

namespace steerlab {

inline std::string fmt_num(double v, int precision = 6) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  std::string s = buf;
  if (s == "-0." + std::string(precision, '0')) s.erase(0, 1);
  return s;
}

// Keeps report file names portable.
inline std::string file_stem(std::string s) {
  for (char& c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  }
  return s;
}

inline std::string csv_rate_columns() { return "n,secure,insecure,other,secure_rate,insecure_rate,other_rate,ci_low,ci_high"; }

inline std::string csv_rate_values(const RateSummary& r) {
  return std::to_string(r.n) + "," + std::to_string(r.secure_count) + "," + std::to_string(r.insecure_count) + "," +
         std::to_string(r.other_count) + "," + fmt_num(r.secure_rate) + "," + fmt_num(r.insecure_rate) + "," +
         fmt_num(r.other_rate) + "," + fmt_num(r.ci_low) + "," + fmt_num(r.ci_high);
}

// --- JSON ------------------------------------------------------------------------

inline Json to_json(const Completion& c) {
  return Json{{"prompt_id", c.prompt_id}, {"cwe", to_string(c.cwe)},  {"seed_index", c.seed_index},
              {"steered", c.steered},     {"label", to_string(c.label)}, {"predicted_class", c.predicted_class},
              {"text", c.text}};
}

inline Json to_json(const SweepResult& s) {
  Json rows = Json::array();
  for (const auto& r : s.rows) rows.push_back({{"fold", r.fold}, {"alpha", r.alpha}, {"summary", to_json(r.summary)}});
  Json vectors = Json::object();
  for (const auto& [fold, v] : s.fold_vectors) {
    vectors[std::to_string(fold)] = {{"norm", v.norm}, {"training_fold_ids", v.training_fold_ids}};
  }
  return Json{{"cwe", to_string(s.cwe)},
              {"layer", s.layer},
              {"model_id", s.model_id},
              {"alpha_grid", s.alpha_grid},
              {"seeds_per_prompt", s.seeds_per_prompt},
              {"baseline", to_json(s.baseline)},
              {"best", {{"alpha", s.best_alpha}, {"secure_rate", s.best_secure_rate}}},
              {"mean_by_alpha", s.mean_by_alpha()},
              {"fold_vectors", vectors},
              {"rows", rows}};
}

inline Json to_json(const TransferMatrix& t) {
  Json cwes = Json::array(), cells = Json::array();
  for (Cwe c : t.cwes) cwes.push_back(to_string(c));
  for (const auto& row : t.cells) {
    Json r = Json::array();
    for (const auto& c : row) r.push_back(to_json(c));
    cells.push_back(r);
  }
  Json j{{"cwes", cwes},
         {"alphas", t.alphas},
         {"cells", cells},
         {"diagonal_mean", t.stats.diagonal_mean},
         {"offdiagonal_mean", t.stats.offdiagonal_mean}};
  if (t.stats.ratio) j["ratio"] = *t.stats.ratio;
  return j;
}

inline Json to_json(const EvalReport& r) {
  Json per = Json::object();
  for (const auto& [cwe, s] : r.per_cwe) per[std::string(to_string(cwe))] = to_json(s);
  Json excluded = Json::array();
  for (const auto& e : r.excluded) excluded.push_back({{"prompt_id", e.prompt_id}, {"error", e.message}});
  Json completions = Json::array();
  for (const auto& c : r.completions) completions.push_back(to_json(c));
  return Json{{"condition", r.condition}, {"strategy", to_string(r.strategy)}, {"overall", to_json(r.overall)},
              {"per_cwe", per},           {"excluded", excluded},               {"completions", completions}};
}

inline Json to_json(const RandomDirectionReport& r) {
  Json controls = Json::array();
  for (const auto& c : r.controls) controls.push_back(to_json(c));
  return Json{{"cwe", to_string(r.cwe)},         {"alpha", r.alpha},
              {"target_norm", r.target_norm},    {"baseline", to_json(r.baseline)},
              {"learned", to_json(r.learned)},   {"controls", controls},
              {"control_mean", r.control_mean},  {"control_std", r.control_std}};
}

// --- CSV -------------------------------------------------------------------------

inline std::string sweep_csv(const SweepResult& s) {
  std::string out = "cwe,fold,alpha," + csv_rate_columns() + "\n";
  for (const auto& r : s.rows) {
    out += std::string(to_string(s.cwe)) + "," + std::to_string(r.fold) + "," + fmt_num(r.alpha, 3) + "," +
           csv_rate_values(r.summary) + "\n";
  }
  return out;
}

// Rows are steering-vector CWEs, columns prompt CWEs; values are secure rates.
inline std::string transfer_csv(const TransferMatrix& t) {
  std::string out = "vector";
  for (Cwe c : t.cwes) out += "," + std::string(to_string(c));
  out += "\n";
  for (std::size_t i = 0; i < t.cwes.size(); ++i) {
    out += std::string(to_string(t.cwes[i]));
    for (const auto& c : t.cells[i]) out += "," + fmt_num(c.secure_rate);
    out += "\n";
  }
  return out;
}

inline std::string eval_csv(const EvalReport& r) {
  std::string out = "condition,scope," + csv_rate_columns() + "\n";
  for (const auto& [cwe, s] : r.per_cwe) {
    out += r.condition + "," + std::string(to_string(cwe)) + "," + csv_rate_values(s) + "\n";
  }
  out += r.condition + ",overall," + csv_rate_values(r.overall) + "\n";
  return out;
}

inline std::string random_direction_csv(const RandomDirectionReport& r) {
  std::string out = "direction," + csv_rate_columns() + "\n";
  out += "baseline," + csv_rate_values(r.baseline) + "\n";
  out += "learned," + csv_rate_values(r.learned) + "\n";
  for (std::size_t i = 0; i < r.controls.size(); ++i) {
    out += "random_" + std::to_string(i) + "," + csv_rate_values(r.controls[i]) + "\n";
  }
  return out;
}

// --- SVG -------------------------------------------------------------------------

struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string svg_line_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                 const std::vector<PlotSeries>& series, double y_min = 0.0, double y_max = 1.0) {
  constexpr double W = 480, H = 320, L = 60, R = 20, T = 40, B = 50;
  double x_min = 0, x_max = 1;
  bool first = true;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      if (first) x_min = x_max = x, first = false;
      x_min = std::min(x_min, x);
      x_max = std::max(x_max, x);
    }
  }
  if (x_max == x_min) x_max = x_min + 1;
  if (y_max == y_min) y_max = y_min + 1;
  auto px = [&](double x) { return L + (x - x_min) / (x_max - x_min) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y_min) / (y_max - y_min) * (H - T - B); };
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

  std::string o = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\" font-family=\"sans-serif\" "
                  "font-size=\"11\">\n";
  o += "<rect width=\"480\" height=\"320\" fill=\"white\"/>\n";
  o += "<text x=\"240\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" + svg_escape(title) + "</text>\n";
  o += "<line x1=\"" + fmt_num(L, 1) + "\" y1=\"" + fmt_num(H - B, 1) + "\" x2=\"" + fmt_num(W - R, 1) + "\" y2=\"" +
       fmt_num(H - B, 1) + "\" stroke=\"black\"/>\n";
  o += "<line x1=\"" + fmt_num(L, 1) + "\" y1=\"" + fmt_num(T, 1) + "\" x2=\"" + fmt_num(L, 1) + "\" y2=\"" +
       fmt_num(H - B, 1) + "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double yv = y_min + (y_max - y_min) * k / 4.0, xv = x_min + (x_max - x_min) * k / 4.0;
    o += "<text x=\"" + fmt_num(L - 6, 1) + "\" y=\"" + fmt_num(py(yv) + 4, 1) + "\" text-anchor=\"end\">" +
         fmt_num(yv, 2) + "</text>\n";
    o += "<text x=\"" + fmt_num(px(xv), 1) + "\" y=\"" + fmt_num(H - B + 16, 1) + "\" text-anchor=\"middle\">" +
         fmt_num(xv, 2) + "</text>\n";
  }
  o += "<text x=\"" + fmt_num((L + W - R) / 2, 1) + "\" y=\"" + fmt_num(H - 12, 1) + "\" text-anchor=\"middle\">" +
       svg_escape(xlabel) + "</text>\n";
  o += "<text x=\"14\" y=\"" + fmt_num((T + H - B) / 2, 1) + "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
       fmt_num((T + H - B) / 2, 1) + ")\">" + svg_escape(ylabel) + "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto* color = kColors[i % 8];
    std::string pts;
    for (auto [x, y] : series[i].points) pts += (pts.empty() ? "" : " ") + fmt_num(px(x), 2) + "," + fmt_num(py(y), 2);
    o += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (auto [x, y] : series[i].points) {
      o += "<circle cx=\"" + fmt_num(px(x), 2) + "\" cy=\"" + fmt_num(py(y), 2) + "\" r=\"3\" fill=\"" + color +
           "\"/>\n";
    }
    o += "<text x=\"" + fmt_num(W - R - 4, 1) + "\" y=\"" + fmt_num(T + 4 + 14.0 * i, 1) + "\" text-anchor=\"end\" fill=\"" +
         color + "\">" + svg_escape(series[i].label) + "</text>\n";
  }
  o += "</svg>\n";
  return o;
}

inline std::string svg_heatmap(const std::string& title, const std::vector<std::string>& rows,
                               const std::vector<std::string>& cols, const std::vector<std::vector<double>>& values) {
  constexpr double cell = 56, L = 80, T = 60;
  const double W = L + cell * cols.size() + 20, H = T + cell * rows.size() + 20;
  std::string o = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt_num(W, 0) + "\" height=\"" +
                  fmt_num(H, 0) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o += "<rect width=\"" + fmt_num(W, 0) + "\" height=\"" + fmt_num(H, 0) + "\" fill=\"white\"/>\n";
  o += "<text x=\"" + fmt_num(W / 2, 1) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" + svg_escape(title) +
       "</text>\n";
  for (std::size_t j = 0; j < cols.size(); ++j) {
    o += "<text x=\"" + fmt_num(L + cell * (j + 0.5), 1) + "\" y=\"" + fmt_num(T - 8, 1) +
         "\" text-anchor=\"middle\">" + svg_escape(cols[j]) + "</text>\n";
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    o += "<text x=\"" + fmt_num(L - 6, 1) + "\" y=\"" + fmt_num(T + cell * (i + 0.5) + 4, 1) +
         "\" text-anchor=\"end\">" + svg_escape(rows[i]) + "</text>\n";
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const double v = std::clamp(values[i][j], 0.0, 1.0);
      const int shade = static_cast<int>(std::lround(255 * (1 - v)));
      char fill[16];
      std::snprintf(fill, sizeof fill, "#%02x%02xff", shade, shade);
      o += "<rect x=\"" + fmt_num(L + cell * j, 1) + "\" y=\"" + fmt_num(T + cell * i, 1) + "\" width=\"" +
           fmt_num(cell, 1) + "\" height=\"" + fmt_num(cell, 1) + "\" fill=\"" + fill + "\" stroke=\"white\"/>\n";
      o += "<text x=\"" + fmt_num(L + cell * (j + 0.5), 1) + "\" y=\"" + fmt_num(T + cell * (i + 0.5) + 4, 1) +
           "\" text-anchor=\"middle\" fill=\"" + (v > 0.5 ? "white" : "black") + "\">" + fmt_num(values[i][j], 2) +
           "</text>\n";
    }
  }
  o += "</svg>\n";
  return o;
}

// --- emission --------------------------------------------------------------------

struct ReportFormats {
  bool csv = true;
  bool json = true;
  bool plots = true;
};

namespace detail {

inline void prepare_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create report directory " + dir.string());
}

inline std::filesystem::path emit(std::vector<std::filesystem::path>& written, const std::filesystem::path& path,
                                  const std::string& text) {
  write_text_file(path, text);
  written.push_back(path);
  return path;
}

}  // namespace detail

inline std::vector<std::filesystem::path> emit_report(const SweepResult& s, const std::filesystem::path& dir,
                                                      const ReportFormats& f = {}) {
  detail::prepare_dir(dir);
  std::vector<std::filesystem::path> written;
  const std::string stem = "sweep_" + std::string(to_string(s.cwe));
  if (f.csv) detail::emit(written, dir / (stem + ".csv"), sweep_csv(s));
  if (f.json) detail::emit(written, dir / (stem + ".json"), dump_pretty(to_json(s)) + "\n");
  if (f.plots) {
    std::set<int> folds;
    for (const auto& r : s.rows) folds.insert(r.fold);
    for (int fold : folds) {
      PlotSeries series{"fold " + std::to_string(fold), {}};
      for (const auto& r : s.rows) {
        if (r.fold == fold) series.points.emplace_back(r.alpha, r.summary.secure_rate);
      }
      detail::emit(written, dir / (stem + "_fold" + std::to_string(fold) + ".svg"),
                   svg_line_plot(std::string(to_string(s.cwe)) + " held-out scenario " + std::to_string(fold),
                                 "alpha", "secure rate", {series}));
    }
  }
  return written;
}

inline std::vector<std::filesystem::path> emit_report(const TransferMatrix& t, const std::filesystem::path& dir,
                                                      const ReportFormats& f = {}) {
  detail::prepare_dir(dir);
  std::vector<std::filesystem::path> written;
  if (f.csv) detail::emit(written, dir / "transfer.csv", transfer_csv(t));
  if (f.json) detail::emit(written, dir / "transfer.json", dump_pretty(to_json(t)) + "\n");
  if (f.plots) {
    std::vector<std::string> names;
    for (Cwe c : t.cwes) names.emplace_back(to_string(c));
    detail::emit(written, dir / "transfer.svg",
                 svg_heatmap("secure rate: vector (rows) x prompts (columns)", names, names, t.secure_rates()));
  }
  return written;
}

inline std::vector<std::filesystem::path> emit_report(const EvalReport& r, const std::filesystem::path& dir,
                                                      const ReportFormats& f = {}) {
  detail::prepare_dir(dir);
  std::vector<std::filesystem::path> written;
  const std::string stem = file_stem("eval_" + r.condition);
  if (f.csv) detail::emit(written, dir / (stem + ".csv"), eval_csv(r));
  if (f.json) detail::emit(written, dir / (stem + ".json"), dump_pretty(to_json(r)) + "\n");
  if (f.plots) {
    std::vector<std::string> names{"overall"};
    std::vector<std::vector<double>> vals{{r.overall.secure_rate}};
    for (const auto& [cwe, s] : r.per_cwe) {
      names.emplace_back(to_string(cwe));
      vals.push_back({s.secure_rate});
    }
    detail::emit(written, dir / (stem + ".svg"), svg_heatmap("secure rate (" + r.condition + ")", names, {"rate"}, vals));
  }
  return written;
}

inline std::vector<std::filesystem::path> emit_report(const RandomDirectionReport& r, const std::filesystem::path& dir,
                                                      const ReportFormats& f = {}) {
  detail::prepare_dir(dir);
  std::vector<std::filesystem::path> written;
  const std::string stem = "random_directions_" + std::string(to_string(r.cwe));
  if (f.csv) detail::emit(written, dir / (stem + ".csv"), random_direction_csv(r));
  if (f.json) detail::emit(written, dir / (stem + ".json"), dump_pretty(to_json(r)) + "\n");
  if (f.plots) {
    PlotSeries controls{"random", {}};
    for (std::size_t i = 0; i < r.controls.size(); ++i) controls.points.emplace_back(i, r.controls[i].secure_rate);
    PlotSeries learned{"learned", {{0.0, r.learned.secure_rate}, {std::max<double>(1, r.controls.size() - 1), r.learned.secure_rate}}};
    detail::emit(written, dir / (stem + ".svg"),
                 svg_line_plot("learned vs random directions", "control index", "secure rate", {learned, controls}));
  }
  return written;
}

inline std::vector<std::filesystem::path> emit_report(const LensTrajectory& t, const std::filesystem::path& dir,
                                                      const ReportFormats& f = {}) {
  detail::prepare_dir(dir);
  std::vector<std::filesystem::path> written;
  const std::string stem =
      file_stem("lens_" + std::string(to_string(t.lens_kind)) + (t.prompt_id.empty() ? "" : "_" + t.prompt_id));
  if (f.csv) detail::emit(written, dir / (stem + ".csv"), trajectory_csv(t));
  if (f.json) {
    Json j = to_json(t);
    j["metrics"] = to_json(emergence_metrics(t));
    detail::emit(written, dir / (stem + ".json"), dump_pretty(j) + "\n");
  }
  if (f.plots) {
    PlotSeries s{"P(target)", {}};
    for (std::size_t l = 0; l < t.p_by_layer.size(); ++l) s.points.emplace_back(l, t.p_by_layer[l]);
    detail::emit(written, dir / (stem + ".svg"), svg_line_plot("layerwise target probability", "layer", "p", {s}));
  }
  return written;
}

}  // namespace steerlab

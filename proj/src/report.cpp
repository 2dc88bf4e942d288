#include "mnarrl/report.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace mnarrl::report {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kWidth = 640.0;
constexpr double kHeight = 400.0;
constexpr double kLeft = 70.0;
constexpr double kRight = 150.0;
constexpr double kTop = 40.0;
constexpr double kBottom = 60.0;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
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

struct Frame {
  Axis x, y;
  double sx(double v) const { return kLeft + (v - x.lo) / (x.hi - x.lo) * (kWidth - kLeft - kRight); }
  double sy(double v) const { return kHeight - kBottom - (v - y.lo) / (y.hi - y.lo) * (kHeight - kTop - kBottom); }
};

void header(std::ostringstream& o, const std::string& title, const Axis& y) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" data-y-min=\"" << num(y.lo) << "\" data-y-max=\"" << num(y.hi) << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << px(kWidth / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
    << escape(title) << "</text>\n";
}

void y_axis(std::ostringstream& o, const Frame& f, const std::string& label) {
  const double x0 = kLeft;
  o << "<line x1=\"" << px(x0) << "\" y1=\"" << px(f.sy(f.y.lo)) << "\" x2=\"" << px(x0) << "\" y2=\""
    << px(f.sy(f.y.hi)) << "\" stroke=\"black\"/>\n";
  const int n = static_cast<int>(std::lround((f.y.hi - f.y.lo) / f.y.step));
  for (int i = 0; i <= n; ++i) {
    const double v = f.y.lo + i * f.y.step;
    o << "<text x=\"" << px(x0 - 6) << "\" y=\"" << px(f.sy(v) + 4) << "\" text-anchor=\"end\" font-size=\"11\">"
      << num(v) << "</text>\n";
    o << "<line x1=\"" << px(x0) << "\" y1=\"" << px(f.sy(v)) << "\" x2=\"" << px(kWidth - kRight) << "\" y2=\""
      << px(f.sy(v)) << "\" stroke=\"#dddddd\"/>\n";
  }
  o << "<text transform=\"translate(16," << px((kHeight - kBottom + kTop) / 2)
    << ") rotate(-90)\" text-anchor=\"middle\" font-size=\"12\">" << escape(label) << "</text>\n";
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  return out;
}

std::optional<double> opt_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

std::string label_for(const fs::path& file, const fs::path& root) {
  auto rel = fs::relative(file.parent_path(), root).generic_string();
  if (rel.empty() || rel == ".") rel = file.parent_path().filename().generic_string();
  if (rel.empty()) rel = "run";
  return rel;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

Axis nice_axis(double lo, double hi, int ticks) {
  if (!std::isfinite(lo) || !std::isfinite(hi)) throw std::invalid_argument("axis bounds must be finite");
  if (lo > hi) std::swap(lo, hi);
  if (hi - lo < 1e-12) {
    const double pad = std::max(std::abs(lo) * 0.1, 0.5);
    lo -= pad;
    hi += pad;
  }
  const double raw = (hi - lo) / std::max(1, ticks);
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0}) {
    step = m * mag;
    if (step >= raw) break;
  }
  Axis a;
  a.step = step;
  a.lo = std::floor(lo / step) * step;
  a.hi = std::ceil(hi / step) * step;
  if (a.lo > lo) a.lo -= step;
  if (a.hi < hi) a.hi += step;
  return a;
}

std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series) {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("series x/y length mismatch");
    for (double v : s.x) xmin = std::min(xmin, v), xmax = std::max(xmax, v);
    for (double v : s.y) ymin = std::min(ymin, v), ymax = std::max(ymax, v);
  }
  if (!std::isfinite(xmin) || !std::isfinite(ymin)) throw EmptyInput("line chart has no points");
  Frame f{nice_axis(xmin, xmax), nice_axis(ymin, ymax)};
  std::ostringstream o;
  header(o, title, f.y);
  y_axis(o, f, y_label);
  o << "<line x1=\"" << px(kLeft) << "\" y1=\"" << px(kHeight - kBottom) << "\" x2=\"" << px(kWidth - kRight)
    << "\" y2=\"" << px(kHeight - kBottom) << "\" stroke=\"black\"/>\n";
  const int nx = static_cast<int>(std::lround((f.x.hi - f.x.lo) / f.x.step));
  for (int i = 0; i <= nx; ++i) {
    const double v = f.x.lo + i * f.x.step;
    o << "<text x=\"" << px(f.sx(v)) << "\" y=\"" << px(kHeight - kBottom + 16)
      << "\" text-anchor=\"middle\" font-size=\"11\">" << num(v) << "</text>\n";
  }
  o << "<text x=\"" << px((kLeft + kWidth - kRight) / 2) << "\" y=\"" << px(kHeight - 14)
    << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(x_label) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kPalette[k % std::size(kPalette)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[k].x.size(); ++i) {
      o << (i ? " " : "") << px(f.sx(series[k].x[i])) << "," << px(f.sy(series[k].y[i]));
    }
    o << "\"/>\n";
    const double ly = kTop + 16.0 * static_cast<double>(k);
    o << "<rect x=\"" << px(kWidth - kRight + 10) << "\" y=\"" << px(ly) << "\" width=\"10\" height=\"10\" fill=\""
      << color << "\"/>\n";
    o << "<text x=\"" << px(kWidth - kRight + 24) << "\" y=\"" << px(ly + 9) << "\" font-size=\"11\">"
      << escape(series[k].name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string bar_chart_svg(const std::string& title, const std::string& y_label, const std::vector<Bar>& bars) {
  if (bars.empty()) throw EmptyInput("bar chart has no bars");
  double ymin = 0.0, ymax = 0.0;
  for (const auto& b : bars) {
    ymin = std::min({ymin, b.value, b.lower.value_or(b.value)});
    ymax = std::max({ymax, b.value, b.upper.value_or(b.value)});
  }
  Frame f{Axis{0.0, static_cast<double>(bars.size()), 1.0}, nice_axis(ymin, ymax)};
  std::ostringstream o;
  header(o, title, f.y);
  y_axis(o, f, y_label);
  const double slot = (kWidth - kLeft - kRight) / static_cast<double>(bars.size());
  const double base = f.sy(std::clamp(0.0, f.y.lo, f.y.hi));
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const auto& b = bars[i];
    const double x = kLeft + slot * static_cast<double>(i) + slot * 0.15;
    const double w = slot * 0.7;
    const double top = f.sy(b.value);
    o << "<rect x=\"" << px(x) << "\" y=\"" << px(std::min(top, base)) << "\" width=\"" << px(w) << "\" height=\""
      << px(std::abs(base - top)) << "\" fill=\"" << kPalette[0] << "\"/>\n";
    if (b.lower && b.upper) {
      const double cx = x + w / 2;
      o << "<line x1=\"" << px(cx) << "\" y1=\"" << px(f.sy(*b.lower)) << "\" x2=\"" << px(cx) << "\" y2=\""
        << px(f.sy(*b.upper)) << "\" stroke=\"black\"/>\n";
    }
    o << "<text x=\"" << px(x + w / 2) << "\" y=\"" << px(kHeight - kBottom + 16)
      << "\" text-anchor=\"middle\" font-size=\"10\">" << escape(b.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::vector<fs::path> build_report(const std::vector<fs::path>& inputs, const fs::path& out_dir) {
  struct Found {
    fs::path file, root;
  };
  std::vector<Found> metrics, reports, ablations;
  for (const auto& in : inputs) {
    if (!fs::exists(in)) throw EmptyInput("input does not exist: " + in.string());
    std::vector<fs::path> files;
    if (fs::is_directory(in)) {
      for (const auto& e : fs::recursive_directory_iterator(in)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
    } else {
      files.push_back(in);
    }
    std::sort(files.begin(), files.end());
    const fs::path root = fs::is_directory(in) ? in : in.parent_path();
    for (const auto& f : files) {
      const auto name = f.filename().string();
      if (name == "metrics.jsonl") metrics.push_back({f, root});
      if (name == "eval_report.jsonl") reports.push_back({f, root});
      if (name == "ablation.csv") ablations.push_back({f, root});
    }
  }

  std::vector<Series> entropy;
  for (const auto& m : metrics) {
    std::ifstream in(m.file);
    Series s;
    s.name = label_for(m.file, m.root);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      if (j.contains("entropy")) {
        s.x.push_back(static_cast<double>(s.x.size()));
        s.y.push_back(j.at("entropy").get<double>());
      }
    }
    if (!s.x.empty()) entropy.push_back(std::move(s));
  }

  std::vector<std::pair<std::string, std::vector<json>>> report_rows;
  for (const auto& r : reports) {
    std::ifstream in(r.file);
    std::vector<json> rows;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) rows.push_back(json::parse(line));
    }
    if (!rows.empty()) report_rows.emplace_back(label_for(r.file, r.root), std::move(rows));
  }

  std::vector<Bar> fqe_bars;
  std::vector<std::vector<std::string>> ablation_table;
  std::vector<std::string> ablation_header;
  for (const auto& a : ablations) {
    std::ifstream in(a.file);
    std::string line;
    std::getline(in, line);
    ablation_header = split_csv(line);
    const auto col = [&](const std::string& name) -> int {
      const auto it = std::find(ablation_header.begin(), ablation_header.end(), name);
      if (it == ablation_header.end()) throw EmptyInput(a.file.string() + ": missing column " + name);
      return static_cast<int>(it - ablation_header.begin());
    };
    const int cv = col("variant"), cf = col("fqe"), cl = col("fqe_lower"), cu = col("fqe_upper");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto cells = split_csv(line);
      cells.resize(ablation_header.size());
      fqe_bars.push_back({cells[static_cast<std::size_t>(cv)], std::stod(cells[static_cast<std::size_t>(cf)]),
                          opt_number(cells[static_cast<std::size_t>(cl)]),
                          opt_number(cells[static_cast<std::size_t>(cu)])});
      ablation_table.push_back(std::move(cells));
    }
  }
  if (fqe_bars.empty()) {
    for (const auto& [name, rows] : report_rows) {
      for (const auto& j : rows) {
        if (j.value("name", "") != "fqe_value") continue;
        Bar b{name, j.at("value").get<double>(), std::nullopt, std::nullopt};
        if (j.contains("lower") && !j["lower"].is_null()) b.lower = j["lower"].get<double>();
        if (j.contains("upper") && !j["upper"].is_null()) b.upper = j["upper"].get<double>();
        fqe_bars.push_back(b);
      }
    }
  }

  std::vector<Bar> kl_bars;
  std::string kl_source;
  for (const auto& [name, rows] : report_rows) {
    for (const auto& j : rows) {
      if (j.value("name", "") == "kl_mean" && j.contains("extra") && j["extra"].contains("kl_per_dim")) {
        const auto dims = j["extra"]["kl_per_dim"].get<std::vector<double>>();
        for (std::size_t k = 0; k < dims.size(); ++k) kl_bars.push_back({"z" + std::to_string(k), dims[k], {}, {}});
        kl_source = name;
        break;
      }
    }
    if (!kl_bars.empty()) break;
  }

  if (entropy.empty() && report_rows.empty() && fqe_bars.empty()) {
    throw EmptyInput("no metrics.jsonl, eval_report.jsonl or ablation.csv found in the inputs");
  }

  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  if (!entropy.empty()) {
    write_text(out_dir / "entropy.svg", line_chart_svg("Policy entropy (stages 2-3)", "epoch", "nats", entropy));
    written.push_back(out_dir / "entropy.svg");
  }
  if (!kl_bars.empty()) {
    write_text(out_dir / "kl_per_dim.svg", bar_chart_svg("KL per latent dimension (" + kl_source + ")", "nats", kl_bars));
    written.push_back(out_dir / "kl_per_dim.svg");
  }
  if (!fqe_bars.empty()) {
    write_text(out_dir / "fqe_comparison.svg", bar_chart_svg("FQE value with 95% CI", "value", fqe_bars));
    written.push_back(out_dir / "fqe_comparison.svg");
  }

  std::ostringstream md;
  md << "# Report\n";
  for (const auto& [name, rows] : report_rows) {
    md << "\n## " << name << "\n\n| metric | value | lower | upper |\n|---|---|---|---|\n";
    for (const auto& j : rows) {
      auto cell = [&](const char* k) {
        return j.contains(k) && !j[k].is_null() ? num(j[k].get<double>()) : std::string();
      };
      md << "| " << j.value("name", "") << " | " << cell("value") << " | " << cell("lower") << " | " << cell("upper")
         << " |\n";
    }
  }
  if (!ablation_table.empty()) {
    md << "\n## Ablation\n\n|";
    for (const auto& h : ablation_header) md << " " << h << " |";
    md << "\n|";
    for (std::size_t i = 0; i < ablation_header.size(); ++i) md << "---|";
    md << "\n";
    for (const auto& row : ablation_table) {
      md << "|";
      for (const auto& c : row) md << " " << c << " |";
      md << "\n";
    }
  }
  write_text(out_dir / "summary.md", md.str());
  written.push_back(out_dir / "summary.md");
  return written;
}

}  // namespace mnarrl::report

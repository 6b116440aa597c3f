#include "osr/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "osr/common.hpp"
#include "osr/experiment.hpp"

namespace osr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::optional<RunRecord> read_run(const fs::path& dir) {
  const fs::path path = dir / "result.json";
  if (!fs::is_regular_file(path)) return std::nullopt;
  std::ifstream in(path);
  try {
    json j = json::parse(in);
    if (!j.contains("schema_version") || j.value("status", "") != "completed") return std::nullopt;
    return RunRecord{dir, std::move(j)};
  } catch (const json::exception& e) {
    throw DataError("corrupt run record " + path.string() + ": " + e.what());
  }
}

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * v;
  return os.str();
}

std::string cell(const std::optional<Summary>& s, bool single) {
  if (!s) return "-";
  return pct(s->mean) + " ± " + pct(s->std) + (single ? "*" : "");
}

std::string crop_text(double lo, double hi) {
  std::ostringstream os;
  os << "(" << lo << ", " << hi << ")";
  return os.str();
}

json summary_json(const std::optional<Summary>& s) {
  if (!s) return nullptr;
  return json{{"mean", s->mean}, {"std", s->std}, {"count", s->count}};
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::vector<RunRecord> collect_runs(const std::vector<fs::path>& inputs) {
  std::vector<RunRecord> runs;
  for (const auto& in : inputs) {
    if (!fs::is_directory(in)) throw DataError("not a directory: " + in.string());
    if (auto r = read_run(in)) {
      runs.push_back(std::move(*r));
      continue;
    }
    std::vector<fs::path> children;
    for (const auto& entry : fs::directory_iterator(in)) {
      if (entry.is_directory()) children.push_back(entry.path());
    }
    std::sort(children.begin(), children.end());
    for (const auto& child : children) {
      if (auto r = read_run(child)) runs.push_back(std::move(*r));
    }
  }
  if (runs.empty()) throw DataError("no completed runs found");
  std::set<int> versions;
  for (const auto& r : runs) versions.insert(r.result.at("schema_version").get<int>());
  if (versions.size() > 1 || *versions.begin() != kResultSchemaVersion) {
    std::string list;
    for (int v : versions) list += (list.empty() ? "" : ", ") + std::to_string(v);
    throw DataError("incompatible result schema versions: " + list + " (expected " +
                    std::to_string(kResultSchemaVersion) + ")");
  }
  return runs;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.count = static_cast<int>(values.size());
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / s.count;
  if (s.count > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / (s.count - 1));
  }
  return s;
}

std::vector<GroupRow> aggregate(const std::vector<RunRecord>& runs) {
  struct Acc {
    GroupRow row;
    std::vector<double> iou, ap;
  };
  std::vector<Acc> groups;
  for (const auto& r : runs) {
    const auto& j = r.result;
    const std::string group = j.at("group").get<std::string>();
    const double lo = j.at("crop_min").get<double>(), hi = j.at("crop_max").get<double>();
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Acc& a) {
      return a.row.group == group && a.row.crop_min == lo && a.row.crop_max == hi;
    });
    if (it == groups.end()) {
      groups.push_back({});
      it = groups.end() - 1;
      it->row.group = group;
      it->row.crop_min = lo;
      it->row.crop_max = hi;
    }
    ++it->row.runs;
    if (!j.at("iou").is_null()) it->iou.push_back(j.at("iou").get<double>());
    if (!j.at("ap").is_null()) it->ap.push_back(j.at("ap").get<double>());
  }
  std::vector<GroupRow> out;
  for (auto& g : groups) {
    if (!g.iou.empty()) g.row.iou = summarize(g.iou);
    if (!g.ap.empty()) g.row.ap = summarize(g.ap);
    g.row.single = g.row.runs == 1;
    out.push_back(g.row);
  }
  return out;
}

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<Summary>& values) {
  const int bar_w = 48, gap = 24, left = 50, top = 40, plot_h = 240, bottom = 150;
  const int n = static_cast<int>(values.size());
  const int width = left + n * (bar_w + gap) + gap;
  const int height = top + plot_h + bottom;
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << escape_xml(title) << "</text>\n";
  for (int tick = 0; tick <= 100; tick += 20) {
    const double y = top + plot_h - plot_h * tick / 100.0;
    os << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << width - gap / 2 << "\" y2=\"" << y
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << tick << "</text>\n";
  }
  for (int i = 0; i < n; ++i) {
    const double x = left + gap + i * (bar_w + gap);
    const double v = std::clamp(values[i].mean, 0.0, 1.0);
    const double h = plot_h * v;
    os << "<rect x=\"" << x << "\" y=\"" << top + plot_h - h << "\" width=\"" << bar_w << "\" height=\"" << h
       << "\" fill=\"#4c78a8\"/>\n";
    const double lo = std::clamp(values[i].mean - values[i].std, 0.0, 1.0);
    const double hi = std::clamp(values[i].mean + values[i].std, 0.0, 1.0);
    const double cx = x + bar_w / 2.0;
    os << "<line x1=\"" << cx << "\" y1=\"" << top + plot_h - plot_h * lo << "\" x2=\"" << cx << "\" y2=\""
       << top + plot_h - plot_h * hi << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << cx << "\" y=\"" << top + plot_h - h - 4 << "\" text-anchor=\"middle\">" << pct(values[i].mean)
       << "</text>\n";
    os << "<text transform=\"translate(" << cx << "," << top + plot_h + 10 << ") rotate(50)\">"
       << escape_xml(i < static_cast<int>(labels.size()) ? labels[i] : "") << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

json write_report(const std::vector<RunRecord>& runs, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto rows = aggregate(runs);

  std::set<std::pair<double, double>> crops;
  for (const auto& r : rows) crops.insert({r.crop_min, r.crop_max});
  const bool show_crop = crops.size() > 1;

  std::ostringstream md;
  md << "# Results\n\n" << runs.size() << " run(s). IoU and AP in percent, mean ± sample std over seeds.\n\n";
  md << "| group |" << (show_crop ? " crop |" : "") << " runs | IoU | AP |\n";
  md << "|---|" << (show_crop ? "---|" : "") << "---|---|---|\n";
  bool any_single = false;
  for (const auto& r : rows) {
    any_single = any_single || r.single;
    md << "| " << r.group << " |" << (show_crop ? " " + crop_text(r.crop_min, r.crop_max) + " |" : "") << " "
       << r.runs << " | " << cell(r.iou, r.single) << " | " << cell(r.ap, r.single) << " |\n";
  }
  if (any_single) md << "\n\\* single run: std reported as 0.\n";

  // Crop-scale matrices (rows: min, columns: max), one per group with several crop ranges.
  json matrices = json::array();
  std::vector<std::string> group_order;
  for (const auto& r : rows) {
    if (std::find(group_order.begin(), group_order.end(), r.group) == group_order.end()) {
      group_order.push_back(r.group);
    }
  }
  for (const auto& g : group_order) {
    std::set<double> mins, maxs;
    std::map<std::pair<double, double>, const GroupRow*> cells;
    for (const auto& r : rows) {
      if (r.group != g) continue;
      mins.insert(r.crop_min);
      maxs.insert(r.crop_max);
      cells[{r.crop_min, r.crop_max}] = &r;
    }
    if (cells.size() < 2) continue;
    json m{{"group", g}, {"crop_min", std::vector<double>(mins.begin(), mins.end())},
           {"crop_max", std::vector<double>(maxs.begin(), maxs.end())}};
    for (const char* metric : {"iou", "ap"}) {
      md << "\n## Crop scale, " << g << ", " << (std::string(metric) == "iou" ? "IoU" : "AP") << "\n\n| min \\ max |";
      for (double hi : maxs) md << " " << hi << " |";
      md << "\n|---|";
      for (std::size_t i = 0; i < maxs.size(); ++i) md << "---|";
      md << "\n";
      json grid = json::array();
      for (double lo : mins) {
        md << "| " << lo << " |";
        json row = json::array();
        for (double hi : maxs) {
          auto it = cells.find({lo, hi});
          const std::optional<Summary>* s = nullptr;
          if (it != cells.end()) s = std::string(metric) == "iou" ? &it->second->iou : &it->second->ap;
          if (s && *s) {
            md << " " << pct((*s)->mean) << " |";
            row.push_back((*s)->mean);
          } else {
            md << " - |";
            row.push_back(nullptr);
          }
        }
        md << "\n";
        grid.push_back(row);
      }
      m[metric] = grid;
    }
    matrices.push_back(m);
  }

  json rows_json = json::array();
  std::vector<std::string> iou_labels, ap_labels;
  std::vector<Summary> iou_vals, ap_vals;
  for (const auto& r : rows) {
    const std::string label = r.group + (show_crop ? " " + crop_text(r.crop_min, r.crop_max) : "");
    rows_json.push_back({{"group", r.group},
                         {"crop_min", r.crop_min},
                         {"crop_max", r.crop_max},
                         {"runs", r.runs},
                         {"single_run", r.single},
                         {"iou", summary_json(r.iou)},
                         {"ap", summary_json(r.ap)}});
    if (r.iou) {
      iou_labels.push_back(label);
      iou_vals.push_back(*r.iou);
    }
    if (r.ap) {
      ap_labels.push_back(label);
      ap_vals.push_back(*r.ap);
    }
  }
  json runs_json = json::array();
  for (const auto& r : runs) {
    runs_json.push_back({{"dir", r.dir.filename().string()},
                         {"group", r.result.at("group")},
                         {"seed", r.result.at("seed")},
                         {"config_hash", r.result.at("config_hash")},
                         {"iou", r.result.at("iou")},
                         {"ap", r.result.at("ap")}});
  }
  json report{{"schema_version", kResultSchemaVersion}, {"rows", rows_json}, {"crop_matrices", matrices},
              {"runs", runs_json}};

  {
    std::ofstream out(out_dir / "report.md");
    out << md.str();
    std::ofstream js(out_dir / "report.json");
    js << report.dump(2) << "\n";
    if (!iou_vals.empty()) std::ofstream(out_dir / "iou.svg") << bar_chart_svg("Segmentation IoU (%)", iou_labels, iou_vals);
    if (!ap_vals.empty()) std::ofstream(out_dir / "ap.svg") << bar_chart_svg("VQA probe AP (%)", ap_labels, ap_vals);
    if (!out || !js) throw DataError("cannot write report into " + out_dir.string());
  }

  for (const auto& r : runs) {
    const fs::path src = r.dir / "overlays";
    if (!fs::is_directory(src)) continue;
    const fs::path dst = out_dir / "overlays" / r.dir.filename();
    fs::create_directories(dst);
    for (const auto& entry : fs::directory_iterator(src)) {
      fs::copy_file(entry.path(), dst / entry.path().filename(), fs::copy_options::overwrite_existing);
    }
  }
  return report;
}

}  // namespace osr

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace osr {

struct RunRecord {
  std::filesystem::path dir;
  nlohmann::json result;
};

// Each input is a run directory (holding result.json) or a directory of run directories.
// Throws DataError when nothing completed is found or schema versions differ.
std::vector<RunRecord> collect_runs(const std::vector<std::filesystem::path>& inputs);

struct Summary {
  int count = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

Summary summarize(const std::vector<double>& values);

struct GroupRow {
  std::string group;
  double crop_min = 0.0;
  double crop_max = 0.0;
  std::optional<Summary> iou;
  std::optional<Summary> ap;
  int runs = 0;
  bool single = false;  // one run only: std is not meaningful
};

// Rows ordered by first appearance, grouped by (group label, crop range).
std::vector<GroupRow> aggregate(const std::vector<RunRecord>& runs);

// Writes report.md, report.json, iou.svg, ap.svg and copies attention overlays into
// out_dir/overlays. Returns the report JSON.
nlohmann::json write_report(const std::vector<RunRecord>& runs, const std::filesystem::path& out_dir);

// Bar chart with one bar per row and +-std whiskers. Values in [0, 1] are drawn as percentages.
std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<Summary>& values);

}  // namespace osr

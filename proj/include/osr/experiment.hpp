#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "osr/config.hpp"
#include "osr/dataset.hpp"

namespace osr {

inline constexpr int kResultSchemaVersion = 1;
inline constexpr const char* kRunRootEnv = "OSR_RUN_ROOT";

// $OSR_RUN_ROOT, or ./runs.
std::filesystem::path default_run_root();

// Splits in manifest order.
std::vector<SplitSpec> dataset_splits(const DataConfig& cfg);
std::filesystem::path dataset_dir(const std::filesystem::path& run_root, const DataConfig& cfg);
nlohmann::json data_json(const ExperimentConfig& cfg);

// Generates and saves the dataset unless `dir` already holds one; then loads it. Results are
// cached per directory for the life of the process.
const Dataset& ensure_dataset(const std::filesystem::path& dir, const DataConfig& cfg);

struct EvalResult {
  std::optional<double> iou;  // absent for the global-only model
  std::optional<double> ap_object;
  std::optional<double> ap_global;
  int constant_maps = 0;
  int degenerate_questions = 0;
  int images = 0;

  // VQA AP of the model's own representation: the object probe when the model has object
  // tokens, the global probe otherwise.
  std::optional<double> ap() const { return ap_object ? ap_object : ap_global; }
};

// Segmentation IoU on the test split and linear-probe AP (probe_train -> test).
// Writes attention overlay images into `overlay_dir` when it is non-empty.
EvalResult evaluate_model(const Model<float>& model, const ExperimentConfig& cfg, const Dataset& data,
                          std::uint64_t seed, const std::filesystem::path& overlay_dir = {});

// Config of a single-seed run and its directory name: <id>-<hash>.
ExperimentConfig single_seed(const ExperimentConfig& cfg, std::uint64_t seed);
std::string run_name(const ExperimentConfig& single);

struct RunOutcome {
  std::filesystem::path dir;
  nlohmann::json result;
  bool reused = false;
};

enum class ExistingRun { error, reuse, replace };

// Trains and evaluates one seed under run_root. A completed run directory is an error, reused,
// or moved aside (never deleted) according to `existing`.
RunOutcome run_single(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& run_root,
                      ExistingRun existing, const std::function<void(const std::string&)>& log = {});

// Re-evaluates the last checkpoint of a completed run; writes eval_only.json beside it.
nlohmann::json eval_only(const std::filesystem::path& run_dir, bool force);

// Cartesian grid over the listed values (empty list keeps the base value). Attention "global"
// selects the global-only baseline, which ignores the loss axis.
struct GridSpec {
  std::vector<std::string> attention;
  std::vector<std::string> loss;
  std::vector<bool> use_global;
  std::vector<std::pair<double, double>> crops;
  std::vector<std::uint64_t> seeds;
};

std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base, const GridSpec& grid);

// "0..3" -> {0,1,2,3}; "1,4" -> {1,4}.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

}  // namespace osr

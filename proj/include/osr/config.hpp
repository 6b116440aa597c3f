#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "osr/losses.hpp"
#include "osr/model.hpp"
#include "osr/probe.hpp"
#include "osr/scenegen.hpp"
#include "osr/trainer.hpp"

namespace osr {

// Dataset sizes and generator settings. Splits are stored contiguously in this order.
struct DataConfig {
  GeneratorSpec generator;
  int train = 5000;
  int val = 250;
  int probe_train = 1000;
  int test = 500;
  std::uint64_t seed = 1234;

  int total() const { return train + val + probe_train + test; }
};

struct EvalConfig {
  ProbeConfig probe;
  bool run_probe = true;
  int overlays = 4;  // test images rendered with attention overlays
};

struct ExperimentConfig {
  std::string id = "exp";
  std::vector<std::uint64_t> seeds{0};
  DataConfig data;
  AugmentConfig augment;
  // 8-pixel patches at desk scale (64 tokens per 64x64 image); the backbone's own default is 4.
  ModelConfig model = [] {
    ModelConfig m;
    m.backbone.patch_size = 8;
    return m;
  }();
  LossConfig losses;
  TrainConfig trainer;
  EvalConfig eval;
  bool fixed_op = false;  // omit wall-clock fields so logs and reports are byte-stable

  nlohmann::json to_json() const;
  // Strict: every key must be known and correctly typed. Missing keys keep their defaults.
  static ExperimentConfig from_json(const nlohmann::json& j);
  void validate() const;

  // Short label used to group runs in reports, e.g. "slot/ctrimg" or "global-only".
  std::string group_label() const;
};

inline constexpr int kConfigSchemaVersion = 1;

// Names accepted by --config besides file paths: smoke, global_only, <attention>_<loss> and
// <attention>_<loss>_objonly with attention in {slot, cross} and loss in {ctrall, ctrimg, cossim}.
std::vector<std::string> preset_names();
bool is_preset(const std::string& name);
ExperimentConfig preset(const std::string& name);

// Preset name or path to a JSON file (which may itself name a "preset" to start from).
ExperimentConfig load_config(const std::string& name_or_path);

// "section.key=value" (nested: "backbone.patch_size=8"). The value is parsed as JSON when
// possible, otherwise taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);
ExperimentConfig with_overrides(const ExperimentConfig& base, const std::vector<std::string>& sets);

// Lists keys in `j` absent from `schema`, as dotted paths.
std::vector<std::string> unknown_keys(const nlohmann::json& j, const nlohmann::json& schema,
                                      const std::string& prefix = "");

// 64-bit FNV-1a over the canonical (sorted-key, compact) JSON text.
std::uint64_t fnv1a(const std::string& text);
std::string config_hash(const nlohmann::json& j);

}  // namespace osr

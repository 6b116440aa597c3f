#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "osr/losses.hpp"
#include "osr/model.hpp"
#include "osr/scenegen.hpp"

namespace osr {

struct TrainConfig {
  int batch_size = 32;
  int epochs = 10;
  int warmup_epochs = 2;
  double lr_peak = 7e-4;
  double lr_final = 3e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // steps; 0 = end of each epoch only

  void validate() const;
};

// Linear warmup from 0 to lr_peak, then cosine decay to lr_final at step epochs * steps_per_epoch.
double lr_schedule(long step, long steps_per_epoch, const TrainConfig& cfg);

// Batches per epoch: floor(n / B) with the remainder dropped, or one short batch when n < B.
long steps_per_epoch(std::size_t train_size, int batch_size);

// Adam with decoupled weight decay. Decay applies to weight matrices only (names ending in
// ".weight", ".w_input", ".w_hidden"), not to biases, norms, embeddings or queries.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const ParameterSet<float>& params);

  void step(ParameterSet<float>& params, double lr, const TrainConfig& cfg);

  long t = 0;
  std::vector<MatF> m, v;
  std::vector<bool> decay;
};

bool decays(const std::string& param_name);

// Scales gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
double clip_grad_norm(ParameterSet<float>& params, double max_norm);

// Projections for a batch of augmented pairs plus the forward caches needed for backward.
struct BatchForward {
  BatchProjections<float> proj;
  std::vector<ModelCache<float>> caches;  // index a*B + b
};

BatchForward forward_pairs(const Model<float>& model, const std::vector<AugmentedPair>& pairs,
                           std::uint64_t query_seed);

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double global = 0.0;
  double object = 0.0;
  double grad_norm = 0.0;
  int zero_norm_slots = 0;
};

struct TrainOptions {
  std::filesystem::path out_dir;       // empty: no files written
  std::filesystem::path resume_from;   // checkpoint to continue from
  long stop_after_steps = -1;          // stop (and checkpoint) once this many total steps ran
  bool log_wall_time = true;           // false for byte-identical metrics logs
  nlohmann::json run_meta = nlohmann::json::object();  // stored in checkpoint metadata
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  ParameterSet<float> params;
  long steps = 0;
  double best_val = 0.0;
  std::vector<StepRecord> log;
  std::vector<double> val_losses;  // one per completed epoch
  std::filesystem::path last_checkpoint;
};

// Training loop. Every random draw is a function of (cfg.seed, step, item), so stopping,
// checkpointing and resuming reproduces an uninterrupted run exactly.
TrainResult train(const std::vector<const SceneSample*>& train_set,
                  const std::vector<const SceneSample*>& val_set, const ModelConfig& model_cfg,
                  const LossConfig& loss_cfg, const AugmentConfig& aug_cfg, const TrainConfig& cfg,
                  const TrainOptions& opts = {});

// Mean total loss over a split with fixed augmentation seeds (no parameter updates).
double evaluate_loss(const Model<float>& model, const std::vector<const SceneSample*>& samples,
                     const LossConfig& loss_cfg, const AugmentConfig& aug_cfg, int batch_size,
                     std::uint64_t seed);

// Parameters plus optimizer state in checkpoint form ("param/<name>", "adam.m/<name>", ...).
void write_train_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params,
                            const AdamW& opt, const nlohmann::json& meta);
ParameterSet<float> read_checkpoint_params(const std::filesystem::path& path);

}  // namespace osr

#pragma once

#include <cstdint>
#include <vector>

#include "osr/common.hpp"
#include "osr/scenegen.hpp"

namespace osr {

struct ProbeConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int steps = 10000;
  int batch_size = 64;
  double max_pos_weight = 100.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Linear map from each feature row to 96 question logits, max-pooled over rows. With one row per
// image (global representation) the max is the identity. Features are standardized with
// statistics of the probe-training rows.
struct LinearProbe {
  MatD weight;         // F x 96
  RowVec<double> bias; // 1 x 96
  RowVec<double> mean, inv_std;

  // Pooled logits for one image (1 x 96).
  RowVec<double> logits(const MatF& features) const;
  // Sigmoid scores, questions x images.
  MatD predict(const std::vector<MatF>& features) const;
};

struct ProbeReport {
  LinearProbe probe;
  int degenerate_questions = 0;  // questions without positives in the training split
  double final_loss = 0.0;
};

// labels: images x 96 (0/1). Positive labels of question q are weighted by neg_q / pos_q,
// clamped to [1, max_pos_weight].
ProbeReport train_probe(const std::vector<MatF>& features, const MatD& labels, const ProbeConfig& cfg);

MatD label_matrix(const std::vector<const SceneSample*>& samples);  // images x 96

}  // namespace osr

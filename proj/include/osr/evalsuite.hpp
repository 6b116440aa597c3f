#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "osr/common.hpp"
#include "osr/image.hpp"
#include "osr/scenegen.hpp"

namespace osr {

struct OtsuResult {
  double threshold = 0.0;  // values > threshold are foreground
  int split_bin = 0;       // first bin of the upper class
};

// Otsu threshold over a 256-bin histogram spanning [min, max]. Among splits with equal
// between-class variance the lowest bin wins. The returned threshold is the midpoint between
// the largest lower-class value and the smallest upper-class value, so binarizing with '>'
// reproduces the histogram partition exactly. Throws NumericError when all values are equal.
OtsuResult otsu_threshold(const std::vector<double>& values);
inline constexpr int kOtsuBins = 256;

// Binary masks (0/1 planes) derived from attention maps.
struct MaskSet {
  std::vector<Plane> masks;
  std::vector<int> source;  // slot index per mask
  int constant_maps = 0;    // maps with no threshold, emitted as all-zero masks
};

// Each row of `attention` (K x grid_rows*grid_cols) is reshaped to the patch grid, bilinearly
// upsampled to target_h x target_w and Otsu-binarized.
MaskSet extract_masks(const MatF& attention, int grid_rows, int grid_cols, int target_h, int target_w);

Plane binarize(const Plane& map, double threshold);

// gt x pred intersection-over-union matrix. Empty unions count as 0.
MatD iou_matrix(const std::vector<Plane>& gt, const std::vector<Plane>& pred);

// Assigns every ground-truth mask to a distinct prediction maximizing total IoU and returns the
// mean over ground-truth objects (unmatched ground truth scores 0, unmatched predictions are
// ignored). Returns nullopt when there is no ground truth.
std::optional<double> image_iou(const std::vector<Plane>& gt, const std::vector<Plane>& pred);

// Mean over images, skipping images without ground truth. Returns 0 when every image was skipped.
double mean_iou(const std::vector<std::optional<double>>& per_image);

// Ground-truth object masks (background excluded).
std::vector<Plane> object_masks(const SceneSample& sample);

// bit q set iff some object has all four attributes of question q.
std::array<std::uint8_t, kNumQuestions> vqa_labels(const std::vector<ObjectAttributes>& objects);

// Micro-averaged average precision over all (score, label) pairs flattened in row-major order.
// Pairs are ranked by descending score, ties by ascending flat index. AP = mean over positives of
// the precision at that positive's rank. Throws NumericError when there are no positives.
double average_precision(const MatD& scores, const MatD& labels);

}  // namespace osr

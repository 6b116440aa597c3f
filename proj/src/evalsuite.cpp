#include "osr/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "osr/assignment.hpp"

namespace osr {

OtsuResult otsu_threshold(const std::vector<double>& values) {
  if (values.empty()) throw NumericError("otsu: empty input");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!std::isfinite(lo) || !std::isfinite(hi)) throw NumericError("otsu: non-finite values");
  if (!(hi > lo)) throw NumericError("otsu: constant map has no threshold");

  const double scale = kOtsuBins / (hi - lo);
  auto bin_of = [&](double v) { return std::min(kOtsuBins - 1, static_cast<int>((v - lo) * scale)); };
  std::array<double, kOtsuBins> count{}, sum{};
  for (double v : values) {
    const int b = bin_of(v);
    count[b] += 1.0;
    sum[b] += v;
  }
  const double n = static_cast<double>(values.size());
  const double total = std::accumulate(sum.begin(), sum.end(), 0.0);

  double best = -1.0;
  int best_split = 1;
  double n0 = 0.0, s0 = 0.0;
  for (int k = 1; k < kOtsuBins; ++k) {
    n0 += count[k - 1];
    s0 += sum[k - 1];
    const double n1 = n - n0;
    if (n0 == 0.0 || n1 == 0.0) continue;
    const double diff = s0 / n0 - (total - s0) / n1;
    const double between = n0 * n1 * diff * diff;
    if (between > best) {
      best = between;
      best_split = k;
    }
  }
  double below = lo, above = hi;
  for (double v : values) {
    if (bin_of(v) < best_split) {
      below = std::max(below, v);
    } else {
      above = std::min(above, v);
    }
  }
  return OtsuResult{0.5 * (below + above), best_split};
}

Plane binarize(const Plane& map, double threshold) {
  Plane out(map.height, map.width);
  for (std::size_t i = 0; i < map.data.size(); ++i) out.data[i] = map.data[i] > threshold ? 1.0f : 0.0f;
  return out;
}

MaskSet extract_masks(const MatF& attention, int grid_rows, int grid_cols, int target_h, int target_w) {
  if (attention.cols() != static_cast<Eigen::Index>(grid_rows) * grid_cols) {
    throw ConfigError("extract_masks: attention width does not match the patch grid");
  }
  MaskSet out;
  for (Eigen::Index k = 0; k < attention.rows(); ++k) {
    Plane grid(grid_rows, grid_cols);
    for (int i = 0; i < grid_rows * grid_cols; ++i) grid.data[i] = attention(k, i);
    const Plane up = resize_bilinear(grid, target_h, target_w);
    std::vector<double> values(up.data.begin(), up.data.end());
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (!(*hi > *lo)) {
      out.masks.emplace_back(target_h, target_w, 0.0f);
      ++out.constant_maps;
    } else {
      out.masks.push_back(binarize(up, otsu_threshold(values).threshold));
    }
    out.source.push_back(static_cast<int>(k));
  }
  return out;
}

MatD iou_matrix(const std::vector<Plane>& gt, const std::vector<Plane>& pred) {
  MatD m(gt.size(), pred.size());
  for (std::size_t g = 0; g < gt.size(); ++g) {
    for (std::size_t p = 0; p < pred.size(); ++p) {
      if (gt[g].data.size() != pred[p].data.size()) throw ConfigError("iou: mask sizes differ");
      double inter = 0.0, uni = 0.0;
      for (std::size_t i = 0; i < gt[g].data.size(); ++i) {
        const bool a = gt[g].data[i] > 0.5f, b = pred[p].data[i] > 0.5f;
        inter += (a && b) ? 1.0 : 0.0;
        uni += (a || b) ? 1.0 : 0.0;
      }
      m(g, p) = uni > 0.0 ? inter / uni : 0.0;
    }
  }
  return m;
}

std::optional<double> image_iou(const std::vector<Plane>& gt, const std::vector<Plane>& pred) {
  if (gt.empty()) return std::nullopt;
  const MatD iou = iou_matrix(gt, pred);
  const Eigen::Index n = std::max(iou.rows(), iou.cols());
  MatD cost = MatD::Zero(n, n);
  cost.topLeftCorner(iou.rows(), iou.cols()) = -iou;
  const auto match = hungarian(cost);
  double total = 0.0;
  for (Eigen::Index g = 0; g < iou.rows(); ++g) {
    const int p = match.sigma[g];
    if (p < iou.cols()) total += iou(g, p);
  }
  return total / static_cast<double>(gt.size());
}

double mean_iou(const std::vector<std::optional<double>>& per_image) {
  double sum = 0.0;
  int count = 0;
  for (const auto& v : per_image) {
    if (v) {
      sum += *v;
      ++count;
    }
  }
  return count > 0 ? sum / count : 0.0;
}

std::vector<Plane> object_masks(const SceneSample& sample) {
  std::vector<Plane> out;
  for (int i = 1; i <= sample.num_objects(); ++i) out.push_back(sample.mask(i));
  return out;
}

std::array<std::uint8_t, kNumQuestions> vqa_labels(const std::vector<ObjectAttributes>& objects) {
  std::array<std::uint8_t, kNumQuestions> bits{};
  for (const auto& o : objects) bits[static_cast<std::size_t>(o.question_index())] = 1;
  return bits;
}

double average_precision(const MatD& scores, const MatD& labels) {
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols()) {
    throw ConfigError("average_precision: score and label shapes differ");
  }
  const Eigen::Index n = scores.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return scores.data()[a] > scores.data()[b]; });
  double positives = 0.0, hits = 0.0, sum = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    if (labels.data()[order[r]] > 0.5) {
      hits += 1.0;
      sum += hits / static_cast<double>(r + 1);
    }
  }
  positives = hits;
  if (positives == 0.0) throw NumericError("average_precision: no positive labels");
  return sum / positives;
}

}  // namespace osr

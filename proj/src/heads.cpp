#include "osr/heads.hpp"

#include <algorithm>
#include <vector>

namespace osr {

template <typename T>
Heads<T>::Heads(ParameterSet<T>& ps, const HeadsConfig& cfg, int dim, bool object_head,
                std::mt19937_64& rng)
    : has_object_head_(object_head) {
  if (cfg.proj_dim < 1 || cfg.global_dim < 1) throw ConfigError("heads: widths must be >= 1");
  if (object_head) {
    object_ = nn::Mlp<T>::make(ps, "heads.object", dim, dim, cfg.proj_dim, rng);
    object_.set_row_exact();
  }
  repr_ = nn::Mlp<T>::make(ps, "heads.repr", dim, dim, cfg.global_dim, rng);
  global_head_ =
      nn::Mlp<T>::make(ps, "heads.global", cfg.global_dim, cfg.global_dim, cfg.proj_dim, rng);
}

template <typename T>
Mat<T> Heads<T>::project_objects(const ParameterSet<T>& ps, const Mat<T>& slots,
                                 HeadsCache<T>& cache) const {
  if (!has_object_head_) throw ConfigError("heads: model has no object projection head");
  return object_.forward(ps, slots, cache.object);
}

template <typename T>
Mat<T> Heads<T>::project_objects_backward(ParameterSet<T>& ps, const HeadsCache<T>& cache,
                                          const Mat<T>& d_proj) const {
  return object_.backward(ps, cache.object, d_proj);
}

template <typename T>
GlobalOutput<T> Heads<T>::global_branch(const ParameterSet<T>& ps, const Mat<T>& inputs,
                                        HeadsCache<T>& cache) const {
  if (inputs.rows() < 1) throw ConfigError("heads: global branch needs at least one input row");
  cache.pooled_input = inputs;
  // Column sums in sorted order: the mean is then bit-identical under any row permutation.
  Mat<T> pooled(1, inputs.cols());
  std::vector<T> column(static_cast<std::size_t>(inputs.rows()));
  for (Eigen::Index j = 0; j < inputs.cols(); ++j) {
    for (Eigen::Index i = 0; i < inputs.rows(); ++i) column[static_cast<std::size_t>(i)] = inputs(i, j);
    std::sort(column.begin(), column.end());
    T total = 0;
    for (T x : column) total += x;
    pooled(0, j) = total / static_cast<T>(inputs.rows());
  }
  GlobalOutput<T> out;
  out.repr = repr_.forward(ps, pooled, cache.repr);
  out.proj = global_head_.forward(ps, out.repr, cache.global_head);
  return out;
}

template <typename T>
Mat<T> Heads<T>::global_backward(ParameterSet<T>& ps, const HeadsCache<T>& cache,
                                 const RowVec<T>& d_proj, const RowVec<T>* d_repr) const {
  Mat<T> dr = global_head_.backward(ps, cache.global_head, d_proj);
  if (d_repr != nullptr) dr += *d_repr;
  Mat<T> dpooled = repr_.backward(ps, cache.repr, dr);
  const auto rows = cache.pooled_input.rows();
  Mat<T> dinputs = dpooled.replicate(rows, 1) / static_cast<T>(rows);
  return dinputs;
}

template class Heads<float>;
template class Heads<double>;

}  // namespace osr

#pragma once

#include <random>

#include "osr/common.hpp"
#include "osr/nn.hpp"
#include "osr/params.hpp"

namespace osr {

struct HeadsConfig {
  int proj_dim = 64;    // D_p; must equal the slot width for the cosine-similarity object loss
  int global_dim = 64;  // D_r
};

template <typename T>
struct HeadsCache {
  nn::MlpCache<T> object;
  Mat<T> pooled_input;  // rows averaged into the global representation
  nn::MlpCache<T> repr;
  nn::MlpCache<T> global_head;
};

template <typename T>
struct GlobalOutput {
  RowVec<T> repr;  // r
  RowVec<T> proj;  // p^G
};

// Object projection MLP (shared across slots) and the global branch: r = MLP(avg(S)),
// p^G = MLP(r). Projection MLPs are training-only; downstream probes read slots and r.
template <typename T>
class Heads {
 public:
  Heads() = default;
  Heads(ParameterSet<T>& ps, const HeadsConfig& cfg, int dim, bool object_head,
        std::mt19937_64& rng);

  Mat<T> project_objects(const ParameterSet<T>& ps, const Mat<T>& slots, HeadsCache<T>& cache) const;
  Mat<T> project_objects_backward(ParameterSet<T>& ps, const HeadsCache<T>& cache,
                                  const Mat<T>& d_proj) const;

  // `inputs` are pooled by row-mean (slots, or the single CLS row in the global-only baseline).
  GlobalOutput<T> global_branch(const ParameterSet<T>& ps, const Mat<T>& inputs,
                                HeadsCache<T>& cache) const;
  // Returns d(inputs). `d_repr` may be null.
  Mat<T> global_backward(ParameterSet<T>& ps, const HeadsCache<T>& cache, const RowVec<T>& d_proj,
                         const RowVec<T>* d_repr = nullptr) const;

  bool has_object_head() const { return has_object_head_; }

 private:
  bool has_object_head_ = true;
  nn::Mlp<T> object_;
  nn::Mlp<T> repr_;
  nn::Mlp<T> global_head_;
};

}  // namespace osr

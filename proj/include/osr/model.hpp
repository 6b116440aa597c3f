#pragma once

#include <cstdint>
#include <random>

#include "osr/backbone.hpp"
#include "osr/grouping.hpp"
#include "osr/heads.hpp"
#include "osr/params.hpp"

namespace osr {

struct ModelConfig {
  BackboneConfig backbone;
  GroupingConfig grouping;
  HeadsConfig heads;
  // Global-only baseline: CLS token feeds the global branch, no object branch.
  bool global_only = false;

  void validate() const;
};

template <typename T>
struct ModelOutput {
  PatchTokens<T> patches;
  SlotSet<T> slots;        // empty for the global-only baseline
  Mat<T> object_proj;      // K x D_p
  GlobalOutput<T> global;  // r and p^G
};

template <typename T>
struct ModelCache {
  BackboneCache<T> backbone;
  GroupingCache<T> grouping;
  HeadsCache<T> heads;
};

// Backbone -> grouping -> projection heads, with parameters in a single ParameterSet.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t init_seed);
  // Adopts existing parameters (e.g. from a checkpoint or a scalar-type cast). Names and shapes
  // must match what `cfg` would construct.
  Model(const ModelConfig& cfg, ParameterSet<T> params);

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  ModelOutput<T> forward(const Image& image, std::uint64_t query_seed, ModelCache<T>& cache) const;
  // `d_object_proj` may be empty (no object loss). Gradients accumulate into params().
  void backward(const ModelCache<T>& cache, const Mat<T>& d_object_proj,
                const RowVec<T>& d_global_proj);

  const Backbone<T>& backbone() const { return backbone_; }
  const Grouping<T>& grouping() const { return grouping_; }
  const Heads<T>& heads() const { return heads_; }

 private:
  void build(std::mt19937_64& rng);

  ModelConfig cfg_;
  ParameterSet<T> params_;
  Backbone<T> backbone_;
  Grouping<T> grouping_;
  Heads<T> heads_;
};

}  // namespace osr

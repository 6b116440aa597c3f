#include "osr/model.hpp"

namespace osr {

void ModelConfig::validate() const {
  backbone.validate();
  grouping.validate();
  if (global_only && !backbone.use_cls_token) {
    throw ConfigError("model: global-only baseline requires backbone.use_cls_token");
  }
  if (heads.proj_dim < 1 || heads.global_dim < 1) throw ConfigError("heads: widths must be >= 1");
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(init_seed);
  build(rng);
}

template <typename T>
void Model<T>::build(std::mt19937_64& rng) {
  backbone_ = Backbone<T>(params_, cfg_.backbone, rng);
  if (!cfg_.global_only) grouping_ = Grouping<T>(params_, cfg_.grouping, cfg_.backbone.embed_dim, rng);
  heads_ = Heads<T>(params_, cfg_.heads, cfg_.backbone.embed_dim, !cfg_.global_only, rng);
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, ParameterSet<T> params) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(0);
  build(rng);
  if (params.size() != params_.size()) {
    throw ConfigError("model: parameter count mismatch (" + std::to_string(params.size()) +
                      " provided, " + std::to_string(params_.size()) + " expected)");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string& name = params_.name(i);
    if (!params.contains(name)) throw ConfigError("model: missing parameter " + name);
    const auto& src = params.value(params.id(name));
    auto& dst = params_.value_at(i);
    if (src.rows() != dst.rows() || src.cols() != dst.cols()) {
      throw ConfigError("model: shape mismatch for parameter " + name);
    }
    dst = src;
  }
}

template <typename T>
ModelOutput<T> Model<T>::forward(const Image& image, std::uint64_t query_seed,
                                 ModelCache<T>& cache) const {
  ModelOutput<T> out;
  out.patches = backbone_.encode(params_, image, cache.backbone);
  if (cfg_.global_only) {
    out.global = heads_.global_branch(params_, out.patches.cls, cache.heads);
    return out;
  }
  out.slots = grouping_.forward(params_, out.patches.tokens, query_seed, cache.grouping);
  out.object_proj = heads_.project_objects(params_, out.slots.slots, cache.heads);
  out.global = heads_.global_branch(params_, out.slots.slots, cache.heads);
  return out;
}

template <typename T>
void Model<T>::backward(const ModelCache<T>& cache, const Mat<T>& d_object_proj,
                        const RowVec<T>& d_global_proj) {
  if (cfg_.global_only) {
    Mat<T> dcls = heads_.global_backward(params_, cache.heads, d_global_proj);
    RowVec<T> dcls_row = dcls.row(0);
    backbone_.backward(params_, cache.backbone,
                       Mat<T>::Zero(cfg_.backbone.num_patches(), cfg_.backbone.embed_dim),
                       &dcls_row);
    return;
  }
  Mat<T> dslots = heads_.global_backward(params_, cache.heads, d_global_proj);
  if (d_object_proj.size() > 0) dslots += heads_.project_objects_backward(params_, cache.heads, d_object_proj);
  Mat<T> dpatches = grouping_.backward(params_, cache.grouping, dslots);
  backbone_.backward(params_, cache.backbone, dpatches);
}

template class Model<float>;
template class Model<double>;

}  // namespace osr

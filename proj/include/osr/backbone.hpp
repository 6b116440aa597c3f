#pragma once

#include <random>
#include <vector>

#include "osr/common.hpp"
#include "osr/image.hpp"
#include "osr/nn.hpp"
#include "osr/params.hpp"

namespace osr {

struct BackboneConfig {
  int image_size = 64;
  int patch_size = 4;
  int embed_dim = 64;
  int num_layers = 2;
  int num_heads = 4;
  int mlp_hidden = 128;
  bool use_cls_token = false;
  // Learned positional-embedding grid; 0 means "same as the token grid".
  int pos_grid = 0;

  int grid_side() const { return image_size / patch_size; }
  int num_patches() const { return grid_side() * grid_side(); }
  int effective_pos_grid() const { return pos_grid > 0 ? pos_grid : grid_side(); }
  void validate() const;
};

// Splits a square image into row-major P x P patches, each flattened as (py, px, channel).
template <typename T>
Mat<T> patchify(const Image& image, int patch_size);

// Interpolation matrix mapping a src x src grid of embeddings to a dst x dst grid (bilinear,
// half-pixel centers). Identity when src == dst.
MatD grid_resample_matrix(int src, int dst);

template <typename T>
struct PatchTokens {
  Mat<T> tokens;  // N x D
  int grid_rows = 0;
  int grid_cols = 0;
  RowVec<T> cls;  // empty unless the backbone carries a CLS token
};

template <typename T>
struct EncoderLayerCache {
  nn::LayerNormCache<T> ln1, ln2;
  nn::AttentionCache<T> attn;
  nn::MlpCache<T> mlp;
};

template <typename T>
struct BackboneCache {
  Mat<T> patches;
  std::vector<EncoderLayerCache<T>> layers;
  nn::LayerNormCache<T> final_norm;
};

// Pre-norm ViT encoder. Positional embeddings are added to the patch tokens at the entry of every
// layer.
template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(ParameterSet<T>& ps, const BackboneConfig& cfg, std::mt19937_64& rng);

  const BackboneConfig& config() const { return cfg_; }

  PatchTokens<T> encode(const ParameterSet<T>& ps, const Image& image, BackboneCache<T>& cache) const;
  // Same as encode, from already patchified pixels and an explicit N x D positional table.
  PatchTokens<T> encode_patches(const ParameterSet<T>& ps, const Mat<T>& patches,
                                const Mat<T>& pos, BackboneCache<T>& cache) const;

  // Accumulates parameter gradients given d(tokens) and, with a CLS token, d(cls).
  void backward(ParameterSet<T>& ps, const BackboneCache<T>& cache, const Mat<T>& d_tokens,
                const RowVec<T>* d_cls = nullptr) const;

  // Positional embeddings resampled to the token grid, N x D.
  Mat<T> positional(const ParameterSet<T>& ps) const;

 private:
  BackboneConfig cfg_;
  nn::Linear<T> embed_;
  ParamId pos_;
  ParamId cls_;
  std::vector<nn::LayerNorm<T>> ln1_, ln2_;
  std::vector<nn::MultiHeadAttention<T>> attn_;
  std::vector<nn::Mlp<T>> mlp_;
  nn::LayerNorm<T> final_norm_;
  Mat<T> resample_;  // N x G, empty when the grids coincide
};

}  // namespace osr

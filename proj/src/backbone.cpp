#include "osr/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace osr {

void BackboneConfig::validate() const {
  if (patch_size <= 0 || image_size <= 0) throw ConfigError("backbone: sizes must be positive");
  if (image_size % patch_size != 0) {
    throw ConfigError("backbone: image side " + std::to_string(image_size) +
                      " not divisible by patch size " + std::to_string(patch_size));
  }
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) {
    throw ConfigError("backbone: embed_dim " + std::to_string(embed_dim) +
                      " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (num_layers < 1 || mlp_hidden < 1) throw ConfigError("backbone: need >= 1 layer and mlp width");
  if (pos_grid < 0) throw ConfigError("backbone: pos_grid must be >= 0");
}

template <typename T>
Mat<T> patchify(const Image& image, int patch_size) {
  if (patch_size <= 0 || image.height % patch_size != 0 || image.width % patch_size != 0) {
    throw ConfigError("patchify: image " + std::to_string(image.height) + "x" +
                      std::to_string(image.width) + " not divisible by patch size " +
                      std::to_string(patch_size));
  }
  const int rows = image.height / patch_size;
  const int cols = image.width / patch_size;
  Mat<T> out(rows * cols, 3 * patch_size * patch_size);
  for (int gr = 0; gr < rows; ++gr) {
    for (int gc = 0; gc < cols; ++gc) {
      const int n = gr * cols + gc;
      int k = 0;
      for (int py = 0; py < patch_size; ++py) {
        for (int px = 0; px < patch_size; ++px) {
          for (int c = 0; c < 3; ++c) {
            out(n, k++) = static_cast<T>(image.at(gr * patch_size + py, gc * patch_size + px, c));
          }
        }
      }
    }
  }
  return out;
}

MatD grid_resample_matrix(int src, int dst) {
  MatD m = MatD::Zero(dst * dst, src * src);
  if (src == dst) {
    m.setIdentity();
    return m;
  }
  const double scale = static_cast<double>(src) / dst;
  auto taps = [&](int o, int& i0, int& i1, double& w1) {
    double s = (o + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src - 1));
    i0 = static_cast<int>(std::floor(s));
    i1 = std::min(i0 + 1, src - 1);
    w1 = s - i0;
  };
  for (int y = 0; y < dst; ++y) {
    int y0, y1;
    double wy;
    taps(y, y0, y1, wy);
    for (int x = 0; x < dst; ++x) {
      int x0, x1;
      double wx;
      taps(x, x0, x1, wx);
      const int row = y * dst + x;
      m(row, y0 * src + x0) += (1 - wy) * (1 - wx);
      m(row, y0 * src + x1) += (1 - wy) * wx;
      m(row, y1 * src + x0) += wy * (1 - wx);
      m(row, y1 * src + x1) += wy * wx;
    }
  }
  return m;
}

template <typename T>
Backbone<T>::Backbone(ParameterSet<T>& ps, const BackboneConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg.embed_dim;
  const int p = cfg.patch_size;
  embed_ = nn::Linear<T>::make(ps, "backbone.embed", 3 * p * p, d, true, rng);
  const int g = cfg.effective_pos_grid();
  pos_ = ps.add("backbone.pos_embed", g * g, d, Init::trunc_normal, rng);
  if (cfg.use_cls_token) cls_ = ps.add("backbone.cls_token", 1, d, Init::trunc_normal, rng);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string prefix = "backbone.layer" + std::to_string(l);
    ln1_.push_back(nn::LayerNorm<T>::make(ps, prefix + ".norm1", d, rng));
    attn_.push_back(nn::MultiHeadAttention<T>::make(ps, prefix + ".attn", d, cfg.num_heads, rng));
    ln2_.push_back(nn::LayerNorm<T>::make(ps, prefix + ".norm2", d, rng));
    mlp_.push_back(nn::Mlp<T>::make(ps, prefix + ".mlp", d, cfg.mlp_hidden, d, rng));
  }
  final_norm_ = nn::LayerNorm<T>::make(ps, "backbone.norm", d, rng);
  if (g != cfg.grid_side()) resample_ = grid_resample_matrix(g, cfg.grid_side()).cast<T>();
}

template <typename T>
Mat<T> Backbone<T>::positional(const ParameterSet<T>& ps) const {
  if (resample_.size() == 0) return ps.value(pos_);
  return resample_ * ps.value(pos_);
}

template <typename T>
PatchTokens<T> Backbone<T>::encode(const ParameterSet<T>& ps, const Image& image,
                                   BackboneCache<T>& cache) const {
  if (image.height != cfg_.image_size || image.width != cfg_.image_size) {
    throw ConfigError("backbone: expected " + std::to_string(cfg_.image_size) + "px input, got " +
                      std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  return encode_patches(ps, patchify<T>(image, cfg_.patch_size), positional(ps), cache);
}

template <typename T>
PatchTokens<T> Backbone<T>::encode_patches(const ParameterSet<T>& ps, const Mat<T>& patches,
                                           const Mat<T>& pos, BackboneCache<T>& cache) const {
  const int n = cfg_.num_patches();
  const int offset = cfg_.use_cls_token ? 1 : 0;
  if (patches.rows() != n || pos.rows() != n) {
    throw ConfigError("backbone: expected " + std::to_string(n) + " patches");
  }
  cache.patches = patches;

  Mat<T> x(n + offset, cfg_.embed_dim);
  x.bottomRows(n) = embed_.forward(ps, cache.patches);
  if (offset) x.row(0) = ps.value(cls_).row(0);

  cache.layers.resize(static_cast<std::size_t>(cfg_.num_layers));
  for (int l = 0; l < cfg_.num_layers; ++l) {
    auto& lc = cache.layers[static_cast<std::size_t>(l)];
    const auto li = static_cast<std::size_t>(l);
    x.bottomRows(n) += pos;
    Mat<T> a = ln1_[li].forward(ps, x, lc.ln1);
    x += attn_[li].forward(ps, a, a, lc.attn);
    Mat<T> m = ln2_[li].forward(ps, x, lc.ln2);
    x += mlp_[li].forward(ps, m, lc.mlp);
    if (!x.allFinite()) {
      throw NumericError("backbone: non-finite activations after layer " + std::to_string(l));
    }
  }
  Mat<T> out = final_norm_.forward(ps, x, cache.final_norm);

  PatchTokens<T> result;
  result.grid_rows = cfg_.grid_side();
  result.grid_cols = cfg_.grid_side();
  result.tokens = out.bottomRows(n);
  if (offset) result.cls = out.row(0);
  return result;
}

template <typename T>
void Backbone<T>::backward(ParameterSet<T>& ps, const BackboneCache<T>& cache,
                           const Mat<T>& d_tokens, const RowVec<T>* d_cls) const {
  const int n = cfg_.num_patches();
  const int offset = cfg_.use_cls_token ? 1 : 0;
  Mat<T> dout = Mat<T>::Zero(n + offset, cfg_.embed_dim);
  dout.bottomRows(n) = d_tokens;
  if (offset && d_cls != nullptr) dout.row(0) = *d_cls;

  Mat<T> dx = final_norm_.backward(ps, cache.final_norm, dout);
  Mat<T> dpos = Mat<T>::Zero(n, cfg_.embed_dim);
  for (int l = cfg_.num_layers - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    const auto& lc = cache.layers[li];
    Mat<T> dm = mlp_[li].backward(ps, lc.mlp, dx);
    dx += ln2_[li].backward(ps, lc.ln2, dm);
    auto [dq, dkv] = attn_[li].backward(ps, lc.attn, dx);
    dq += dkv;
    dx += ln1_[li].backward(ps, lc.ln1, dq);
    dpos += dx.bottomRows(n);
  }
  if (resample_.size() == 0) {
    ps.grad(pos_) += dpos;
  } else {
    ps.grad(pos_).noalias() += resample_.transpose() * dpos;
  }
  if (offset) ps.grad(cls_).row(0) += dx.row(0);
  embed_.backward_params(ps, cache.patches, dx.bottomRows(n));
}

template Mat<float> patchify<float>(const Image&, int);
template Mat<double> patchify<double>(const Image&, int);
template class Backbone<float>;
template class Backbone<double>;

}  // namespace osr

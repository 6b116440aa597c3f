#pragma once

// Differentiable building blocks with hand-written backward passes.
//
// Every layer follows the same protocol: `forward` fills a cache struct owned by the caller,
// `backward` consumes that cache plus the upstream gradient, accumulates parameter gradients
// into the ParameterSet and returns the gradient with respect to the layer input(s).

#include <random>
#include <string>
#include <vector>

#include "osr/common.hpp"
#include "osr/params.hpp"

namespace osr::nn {

// a * b computed one row at a time, so each output row depends only on the matching row of `a`
// (blocked GEMM kernels treat rows differently by position). Used on the slot axis, where
// permuting slots must permute outputs bit for bit.
template <typename T>
Mat<T> row_exact_product(const Mat<T>& a, const Mat<T>& b) {
  Mat<T> out(a.rows(), b.cols());
  RowVec<T> row(a.cols());
  RowVec<T> res(b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    row = a.row(i);
    res.noalias() = row * b;
    out.row(i) = res;
  }
  return out;
}

template <typename T>
struct Linear {
  ParamId weight;  // in x out
  ParamId bias;    // 1 x out, may be invalid
  bool row_exact = false;

  static Linear make(ParameterSet<T>& ps, const std::string& name, Eigen::Index in,
                     Eigen::Index out, bool with_bias, std::mt19937_64& rng);

  Mat<T> forward(const ParameterSet<T>& ps, const Mat<T>& x) const;
  // Returns dx. `x` is the forward input.
  Mat<T> backward(ParameterSet<T>& ps, const Mat<T>& x, const Mat<T>& dy) const;
  // Accumulates parameter gradients only (input gradient not needed).
  void backward_params(ParameterSet<T>& ps, const Mat<T>& x, const Mat<T>& dy) const;
};

template <typename T>
struct LayerNormCache {
  Mat<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

// Row-wise layer normalization with learned scale and shift.
template <typename T>
struct LayerNorm {
  ParamId gamma;
  ParamId beta;
  static constexpr double kEps = 1e-5;

  static LayerNorm make(ParameterSet<T>& ps, const std::string& name, Eigen::Index dim,
                        std::mt19937_64& rng);

  Mat<T> forward(const ParameterSet<T>& ps, const Mat<T>& x, LayerNormCache<T>& cache) const;
  Mat<T> backward(ParameterSet<T>& ps, const LayerNormCache<T>& cache, const Mat<T>& dy) const;
};

template <typename T>
Mat<T> gelu(const Mat<T>& x);
template <typename T>
Mat<T> gelu_backward(const Mat<T>& x, const Mat<T>& dy);

template <typename T>
struct MlpCache {
  Mat<T> input;
  Mat<T> hidden_pre;
  Mat<T> hidden;
};

// Two linear layers with a GeLU in between.
template <typename T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;

  void set_row_exact() { fc1.row_exact = fc2.row_exact = true; }

  static Mlp make(ParameterSet<T>& ps, const std::string& name, Eigen::Index in,
                  Eigen::Index hidden, Eigen::Index out, std::mt19937_64& rng);

  Mat<T> forward(const ParameterSet<T>& ps, const Mat<T>& x, MlpCache<T>& cache) const;
  Mat<T> backward(ParameterSet<T>& ps, const MlpCache<T>& cache, const Mat<T>& dy) const;
};

template <typename T>
struct AttentionCache {
  Mat<T> xq;
  Mat<T> xkv;
  Mat<T> q, k, v;
  std::vector<Mat<T>> probs;  // per head, M x N, rows sum to 1
  Mat<T> merged;              // M x D, heads concatenated before output projection
};

// Multi-head scaled dot-product attention, queries from `xq` attend over `xkv` (softmax over keys).
template <typename T>
struct MultiHeadAttention {
  Linear<T> to_q, to_k, to_v, to_out;
  int num_heads = 1;
  // Query-side products row by row (see row_exact_product).
  bool row_exact = false;

  static MultiHeadAttention make(ParameterSet<T>& ps, const std::string& name, Eigen::Index dim,
                                 int num_heads, std::mt19937_64& rng);

  Mat<T> forward(const ParameterSet<T>& ps, const Mat<T>& xq, const Mat<T>& xkv,
                 AttentionCache<T>& cache) const;
  // Returns {dxq, dxkv}.
  std::pair<Mat<T>, Mat<T>> backward(ParameterSet<T>& ps, const AttentionCache<T>& cache,
                                     const Mat<T>& dy) const;
  // Head-averaged attention map, M x N.
  static Mat<T> mean_attention(const AttentionCache<T>& cache);
};

template <typename T>
struct GruCache {
  Mat<T> x, h;
  Mat<T> r, z, n;
  Mat<T> hidden_cand;  // h W_hn + b_hn
};

// Gated recurrent unit cell (reset, update, candidate), applied row-wise.
template <typename T>
struct GruCell {
  ParamId w_input;   // D_in x 3D, gate order [reset | update | candidate]
  ParamId w_hidden;  // D x 3D
  ParamId b_input;   // 1 x 3D
  ParamId b_hidden;  // 1 x 3D

  static GruCell make(ParameterSet<T>& ps, const std::string& name, Eigen::Index in,
                      Eigen::Index hidden, std::mt19937_64& rng);

  Mat<T> forward(const ParameterSet<T>& ps, const Mat<T>& x, const Mat<T>& h,
                 GruCache<T>& cache) const;
  // Returns {dx, dh}.
  std::pair<Mat<T>, Mat<T>> backward(ParameterSet<T>& ps, const GruCache<T>& cache,
                                     const Mat<T>& dy) const;
};

// Row-wise softmax in place.
template <typename T>
void softmax_rows(Mat<T>& x);

template <typename T>
bool all_finite(const Mat<T>& x) {
  return x.allFinite();
}

}  // namespace osr::nn

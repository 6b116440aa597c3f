#include "osr/nn.hpp"

#include <algorithm>
#include <cmath>

namespace osr::nn {

// ---------------------------------------------------------------------------- Linear

template <typename T>
Linear<T> Linear<T>::make(ParameterSet<T>& ps, const std::string& name, Eigen::Index in,
                          Eigen::Index out, bool with_bias, std::mt19937_64& rng) {
  Linear layer;
  layer.weight = ps.add(name + ".weight", in, out, Init::trunc_normal, rng);
  if (with_bias) layer.bias = ps.add(name + ".bias", 1, out, Init::zeros, rng);
  return layer;
}

template <typename T>
Mat<T> Linear<T>::forward(const ParameterSet<T>& ps, const Mat<T>& x) const {
  Mat<T> y;
  if (row_exact) {
    y = row_exact_product(x, ps.value(weight));
  } else {
    y.noalias() = x * ps.value(weight);
  }
  if (bias.valid()) y.rowwise() += ps.value(bias).row(0);
  return y;
}

template <typename T>
void Linear<T>::backward_params(ParameterSet<T>& ps, const Mat<T>& x, const Mat<T>& dy) const {
  ps.grad(weight).noalias() += x.transpose() * dy;
  if (bias.valid()) ps.grad(bias).row(0) += dy.colwise().sum();
}

template <typename T>
Mat<T> Linear<T>::backward(ParameterSet<T>& ps, const Mat<T>& x, const Mat<T>& dy) const {
  backward_params(ps, x, dy);
  Mat<T> dx;
  dx.noalias() = dy * ps.value(weight).transpose();
  return dx;
}

// ---------------------------------------------------------------------------- LayerNorm

template <typename T>
LayerNorm<T> LayerNorm<T>::make(ParameterSet<T>& ps, const std::string& name, Eigen::Index dim,
                                std::mt19937_64& rng) {
  LayerNorm ln;
  ln.gamma = ps.add(name + ".gamma", 1, dim, Init::ones, rng);
  ln.beta = ps.add(name + ".beta", 1, dim, Init::zeros, rng);
  return ln;
}

template <typename T>
Mat<T> LayerNorm<T>::forward(const ParameterSet<T>& ps, const Mat<T>& x,
                             LayerNormCache<T>& cache) const {
  const Eigen::Index rows = x.rows();
  const T inv_d = T(1) / static_cast<T>(x.cols());
  cache.xhat.resize(x.rows(), x.cols());
  cache.rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = x.row(r).sum() * inv_d;
    auto centered = (x.row(r).array() - mean);
    const T var = centered.square().sum() * inv_d;
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(kEps));
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = centered * rstd;
  }
  Mat<T> y = cache.xhat.array().rowwise() * ps.value(gamma).row(0).array();
  y.rowwise() += ps.value(beta).row(0);
  return y;
}

template <typename T>
Mat<T> LayerNorm<T>::backward(ParameterSet<T>& ps, const LayerNormCache<T>& cache,
                              const Mat<T>& dy) const {
  ps.grad(gamma).row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  ps.grad(beta).row(0) += dy.colwise().sum();
  Mat<T> dxhat = dy.array().rowwise() * ps.value(gamma).row(0).array();
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T mean_dxhat = dxhat.row(r).sum() * inv_d;
    const T mean_dxhat_xhat = dxhat.row(r).dot(cache.xhat.row(r)) * inv_d;
    dx.row(r) = cache.rstd(r) * (dxhat.row(r).array() - mean_dxhat -
                                 cache.xhat.row(r).array() * mean_dxhat_xhat)
                                    .matrix();
  }
  return dx;
}

// ---------------------------------------------------------------------------- GeLU

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

template <typename T>
Mat<T> gelu(const Mat<T>& x) {
  return x.unaryExpr([](T v) {
    return static_cast<T>(0.5) * v * (T(1) + std::erf(v * static_cast<T>(kInvSqrt2)));
  });
}

template <typename T>
Mat<T> gelu_backward(const Mat<T>& x, const Mat<T>& dy) {
  Mat<T> dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const T v = x.data()[i];
    const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(v * static_cast<T>(kInvSqrt2)));
    const T pdf = static_cast<T>(kInvSqrt2Pi) * std::exp(static_cast<T>(-0.5) * v * v);
    dx.data()[i] = dy.data()[i] * (cdf + v * pdf);
  }
  return dx;
}

// ---------------------------------------------------------------------------- MLP

template <typename T>
Mlp<T> Mlp<T>::make(ParameterSet<T>& ps, const std::string& name, Eigen::Index in,
                    Eigen::Index hidden, Eigen::Index out, std::mt19937_64& rng) {
  Mlp m;
  m.fc1 = Linear<T>::make(ps, name + ".fc1", in, hidden, true, rng);
  m.fc2 = Linear<T>::make(ps, name + ".fc2", hidden, out, true, rng);
  return m;
}

template <typename T>
Mat<T> Mlp<T>::forward(const ParameterSet<T>& ps, const Mat<T>& x, MlpCache<T>& cache) const {
  cache.input = x;
  cache.hidden_pre = fc1.forward(ps, x);
  cache.hidden = gelu(cache.hidden_pre);
  return fc2.forward(ps, cache.hidden);
}

template <typename T>
Mat<T> Mlp<T>::backward(ParameterSet<T>& ps, const MlpCache<T>& cache, const Mat<T>& dy) const {
  Mat<T> dh = fc2.backward(ps, cache.hidden, dy);
  Mat<T> dpre = gelu_backward(cache.hidden_pre, dh);
  return fc1.backward(ps, cache.input, dpre);
}

// ---------------------------------------------------------------------------- softmax

template <typename T>
void softmax_rows(Mat<T>& x) {
  // Scalar loops: Eigen's packet paths make a row's result depend on its position in x.
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    T mx = x(r, 0);
    for (Eigen::Index c = 1; c < x.cols(); ++c) mx = std::max(mx, x(r, c));
    T total = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      x(r, c) = std::exp(x(r, c) - mx);
      total += x(r, c);
    }
    for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) /= total;
  }
}

// ---------------------------------------------------------------------------- attention

template <typename T>
MultiHeadAttention<T> MultiHeadAttention<T>::make(ParameterSet<T>& ps, const std::string& name,
                                                  Eigen::Index dim, int num_heads,
                                                  std::mt19937_64& rng) {
  if (num_heads <= 0 || dim % num_heads != 0) {
    throw ConfigError(name + ": embedding dim " + std::to_string(dim) +
                      " not divisible by num_heads " + std::to_string(num_heads));
  }
  MultiHeadAttention a;
  a.num_heads = num_heads;
  a.to_q = Linear<T>::make(ps, name + ".q", dim, dim, true, rng);
  a.to_k = Linear<T>::make(ps, name + ".k", dim, dim, true, rng);
  a.to_v = Linear<T>::make(ps, name + ".v", dim, dim, true, rng);
  a.to_out = Linear<T>::make(ps, name + ".out", dim, dim, true, rng);
  return a;
}

template <typename T>
Mat<T> MultiHeadAttention<T>::forward(const ParameterSet<T>& ps, const Mat<T>& xq,
                                      const Mat<T>& xkv, AttentionCache<T>& cache) const {
  cache.xq = xq;
  cache.xkv = xkv;
  Linear<T> q_layer = to_q, out_layer = to_out;
  q_layer.row_exact = out_layer.row_exact = row_exact;
  cache.q = q_layer.forward(ps, xq);
  cache.k = to_k.forward(ps, xkv);
  cache.v = to_v.forward(ps, xkv);
  const Eigen::Index dim = cache.q.cols();
  const Eigen::Index hd = dim / num_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  cache.probs.resize(static_cast<std::size_t>(num_heads));
  cache.merged.resize(xq.rows(), dim);
  for (int h = 0; h < num_heads; ++h) {
    auto& p = cache.probs[static_cast<std::size_t>(h)];
    if (row_exact) {
      p = row_exact_product<T>(cache.q.middleCols(h * hd, hd), cache.k.middleCols(h * hd, hd).transpose());
    } else {
      p.noalias() = cache.q.middleCols(h * hd, hd) * cache.k.middleCols(h * hd, hd).transpose();
    }
    p *= scale;
    softmax_rows(p);
    if (row_exact) {
      cache.merged.middleCols(h * hd, hd) = row_exact_product<T>(p, cache.v.middleCols(h * hd, hd));
    } else {
      cache.merged.middleCols(h * hd, hd).noalias() = p * cache.v.middleCols(h * hd, hd);
    }
  }
  return out_layer.forward(ps, cache.merged);
}

template <typename T>
std::pair<Mat<T>, Mat<T>> MultiHeadAttention<T>::backward(ParameterSet<T>& ps,
                                                          const AttentionCache<T>& cache,
                                                          const Mat<T>& dy) const {
  Mat<T> dmerged = to_out.backward(ps, cache.merged, dy);
  const Eigen::Index dim = cache.q.cols();
  const Eigen::Index hd = dim / num_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  Mat<T> dq(cache.q.rows(), dim), dk(cache.k.rows(), dim), dv(cache.v.rows(), dim);
  Mat<T> dp, ds;
  for (int h = 0; h < num_heads; ++h) {
    const auto& p = cache.probs[static_cast<std::size_t>(h)];
    auto dout_h = dmerged.middleCols(h * hd, hd);
    dv.middleCols(h * hd, hd).noalias() = p.transpose() * dout_h;
    dp.noalias() = dout_h * cache.v.middleCols(h * hd, hd).transpose();
    // softmax backward: ds = p * (dp - rowsum(dp * p))
    Eigen::Matrix<T, Eigen::Dynamic, 1> inner = (dp.array() * p.array()).rowwise().sum();
    ds = p.array() * (dp.array().colwise() - inner.array());
    ds *= scale;
    dq.middleCols(h * hd, hd).noalias() = ds * cache.k.middleCols(h * hd, hd);
    dk.middleCols(h * hd, hd).noalias() = ds.transpose() * cache.q.middleCols(h * hd, hd);
  }
  Mat<T> dxq = to_q.backward(ps, cache.xq, dq);
  Mat<T> dxkv = to_k.backward(ps, cache.xkv, dk);
  dxkv += to_v.backward(ps, cache.xkv, dv);
  return {std::move(dxq), std::move(dxkv)};
}

template <typename T>
Mat<T> MultiHeadAttention<T>::mean_attention(const AttentionCache<T>& cache) {
  Mat<T> avg = cache.probs.front();
  for (std::size_t h = 1; h < cache.probs.size(); ++h) avg += cache.probs[h];
  avg /= static_cast<T>(cache.probs.size());
  return avg;
}

// ---------------------------------------------------------------------------- GRU

template <typename T>
GruCell<T> GruCell<T>::make(ParameterSet<T>& ps, const std::string& name, Eigen::Index in,
                            Eigen::Index hidden, std::mt19937_64& rng) {
  GruCell g;
  g.w_input = ps.add(name + ".w_input", in, 3 * hidden, Init::trunc_normal, rng);
  g.w_hidden = ps.add(name + ".w_hidden", hidden, 3 * hidden, Init::trunc_normal, rng);
  g.b_input = ps.add(name + ".b_input", 1, 3 * hidden, Init::zeros, rng);
  g.b_hidden = ps.add(name + ".b_hidden", 1, 3 * hidden, Init::zeros, rng);
  return g;
}

namespace {
template <typename T>
T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}
}  // namespace

template <typename T>
Mat<T> GruCell<T>::forward(const ParameterSet<T>& ps, const Mat<T>& x, const Mat<T>& h,
                           GruCache<T>& cache) const {
  const Eigen::Index d = h.cols();
  // Only used on slots, so always row-exact.
  Mat<T> gi = row_exact_product(x, ps.value(w_input));
  gi.rowwise() += ps.value(b_input).row(0);
  Mat<T> gh = row_exact_product(h, ps.value(w_hidden));
  gh.rowwise() += ps.value(b_hidden).row(0);

  cache.x = x;
  cache.h = h;
  cache.r = (gi.leftCols(d) + gh.leftCols(d)).unaryExpr([](T v) { return sigmoid(v); });
  cache.z = (gi.middleCols(d, d) + gh.middleCols(d, d)).unaryExpr([](T v) { return sigmoid(v); });
  cache.hidden_cand = gh.rightCols(d);
  // scalar tanh keeps each row independent of its position (see row_exact_product)
  cache.n = (gi.rightCols(d).array() + cache.r.array() * cache.hidden_cand.array())
                .unaryExpr([](T v) { return std::tanh(v); });
  Mat<T> out = ((T(1) - cache.z.array()) * cache.n.array() + cache.z.array() * h.array()).matrix();
  return out;
}

template <typename T>
std::pair<Mat<T>, Mat<T>> GruCell<T>::backward(ParameterSet<T>& ps, const GruCache<T>& cache,
                                               const Mat<T>& dy) const {
  const Eigen::Index d = cache.h.cols();
  const Eigen::Index rows = cache.h.rows();
  auto r = cache.r.array();
  auto z = cache.z.array();
  auto n = cache.n.array();

  Mat<T> dn = dy.array() * (T(1) - z);
  Mat<T> dz = dy.array() * (cache.h.array() - n);
  Mat<T> dh = dy.array() * z;

  Mat<T> dpre_n = dn.array() * (T(1) - n.square());
  Mat<T> dr = dpre_n.array() * cache.hidden_cand.array();
  Mat<T> dpre_z = dz.array() * z * (T(1) - z);
  Mat<T> dpre_r = dr.array() * r * (T(1) - r);

  Mat<T> dgi(rows, 3 * d), dgh(rows, 3 * d);
  dgi.leftCols(d) = dpre_r;
  dgi.middleCols(d, d) = dpre_z;
  dgi.rightCols(d) = dpre_n;
  dgh.leftCols(d) = dpre_r;
  dgh.middleCols(d, d) = dpre_z;
  dgh.rightCols(d) = dpre_n.array() * r;

  ps.grad(w_input).noalias() += cache.x.transpose() * dgi;
  ps.grad(b_input).row(0) += dgi.colwise().sum();
  ps.grad(w_hidden).noalias() += cache.h.transpose() * dgh;
  ps.grad(b_hidden).row(0) += dgh.colwise().sum();

  Mat<T> dx = dgi * ps.value(w_input).transpose();
  dh.noalias() += dgh * ps.value(w_hidden).transpose();
  return {std::move(dx), std::move(dh)};
}

// ---------------------------------------------------------------------------- instantiations

#define OSR_NN_INSTANTIATE(T)                                              \
  template struct Linear<T>;                                               \
  template struct LayerNorm<T>;                                            \
  template struct Mlp<T>;                                                  \
  template struct MultiHeadAttention<T>;                                   \
  template struct GruCell<T>;                                              \
  template Mat<T> gelu<T>(const Mat<T>&);                                  \
  template Mat<T> gelu_backward<T>(const Mat<T>&, const Mat<T>&);          \
  template void softmax_rows<T>(Mat<T>&);

OSR_NN_INSTANTIATE(float)
OSR_NN_INSTANTIATE(double)

}  // namespace osr::nn

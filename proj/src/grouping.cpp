#include "osr/grouping.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace osr {

std::string to_string(AttentionKind k) { return k == AttentionKind::slot ? "slot" : "cross"; }

std::string to_string(QueryKind k) {
  switch (k) {
    case QueryKind::learned: return "learned";
    case QueryKind::gaussian: return "gaussian";
    case QueryKind::gaussian_mixture: return "gaussian_mixture";
    case QueryKind::kmeans_init: return "kmeans_init";
  }
  return "learned";
}

AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "slot") return AttentionKind::slot;
  if (s == "cross") return AttentionKind::cross;
  throw ConfigError("unknown attention kind '" + s + "' (expected slot|cross)");
}

QueryKind parse_query_kind(const std::string& s) {
  if (s == "learned") return QueryKind::learned;
  if (s == "gaussian") return QueryKind::gaussian;
  if (s == "gaussian_mixture") return QueryKind::gaussian_mixture;
  if (s == "kmeans_init") return QueryKind::kmeans_init;
  throw ConfigError("unknown query strategy '" + s + "'");
}

void GroupingConfig::validate() const {
  if (queries.num_queries < 1) throw ConfigError("grouping: num_queries must be >= 1");
  if (attention == AttentionKind::cross && (cross_layers < 1 || cross_layers > 2)) {
    throw ConfigError("grouping: cross attention supports 1 or 2 layers");
  }
  if (attention == AttentionKind::slot && slot_iterations < 1) {
    throw ConfigError("grouping: slot_iterations must be >= 1");
  }
  if (queries.kind == QueryKind::gaussian_mixture && queries.mixture_components < 1) {
    throw ConfigError("grouping: mixture_components must be >= 1");
  }
  if (slot_epsilon < 0) throw ConfigError("grouping: slot_epsilon must be >= 0");
  if (weight_init != "xavier" && weight_init != "trunc_normal") {
    throw ConfigError("grouping: weight_init must be xavier or trunc_normal, got '" + weight_init + "'");
  }
}

template <typename T>
Grouping<T>::Grouping(ParameterSet<T>& ps, const GroupingConfig& cfg, int dim, std::mt19937_64& rng)
    : cfg_(cfg), dim_(dim) {
  cfg_.validate();
  const int k = cfg.queries.num_queries;
  switch (cfg.queries.kind) {
    case QueryKind::learned:
      queries_ = ps.add("grouping.queries", k, dim, Init::trunc_normal, rng);
      break;
    case QueryKind::gaussian:
      query_mean_ = ps.add("grouping.query_mean", 1, dim, Init::trunc_normal, rng);
      query_std_ = ps.add("grouping.query_std", 1, dim, Init::ones, rng);
      break;
    case QueryKind::gaussian_mixture: {
      const int c = cfg.queries.mixture_components;
      query_mean_ = ps.add("grouping.query_mean", c, dim, Init::trunc_normal, rng);
      query_std_ = ps.add("grouping.query_std", c, dim, Init::ones, rng);
      break;
    }
    case QueryKind::kmeans_init: break;
  }

  if (cfg.attention == AttentionKind::cross) {
    if (dim % cfg.cross_heads != 0) {
      throw ConfigError("grouping: dim not divisible by cross_heads");
    }
    for (int l = 0; l < cfg.cross_layers; ++l) {
      const std::string prefix = "grouping.cross" + std::to_string(l);
      cross_ln_q_.push_back(nn::LayerNorm<T>::make(ps, prefix + ".norm_q", dim, rng));
      cross_ln_kv_.push_back(nn::LayerNorm<T>::make(ps, prefix + ".norm_kv", dim, rng));
      cross_attn_.push_back(
          nn::MultiHeadAttention<T>::make(ps, prefix + ".attn", dim, cfg.cross_heads, rng));
      cross_attn_.back().row_exact = true;
      cross_ln_mlp_.push_back(nn::LayerNorm<T>::make(ps, prefix + ".norm_mlp", dim, rng));
      cross_mlp_.push_back(nn::Mlp<T>::make(ps, prefix + ".mlp", dim, cfg.cross_mlp_hidden, dim, rng));
      cross_mlp_.back().set_row_exact();
    }
  } else {
    slot_ln_inputs_ = nn::LayerNorm<T>::make(ps, "grouping.slot.norm_inputs", dim, rng);
    slot_ln_slots_ = nn::LayerNorm<T>::make(ps, "grouping.slot.norm_slots", dim, rng);
    slot_q_ = nn::Linear<T>::make(ps, "grouping.slot.q", dim, dim, false, rng);
    slot_q_.row_exact = true;
    slot_k_ = nn::Linear<T>::make(ps, "grouping.slot.k", dim, dim, false, rng);
    slot_v_ = nn::Linear<T>::make(ps, "grouping.slot.v", dim, dim, false, rng);
    slot_gru_ = nn::GruCell<T>::make(ps, "grouping.slot.gru", dim, dim, rng);
  }

  if (cfg.weight_init == "xavier") {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const std::string& name = ps.name(i);
      if (name.rfind("grouping.", 0) != 0) continue;
      const bool gru = name.ends_with(".w_input") || name.ends_with(".w_hidden");
      if (!gru && !name.ends_with(".weight")) continue;
      auto& w = ps.value_at(i);
      // GRU matrices hold three gates side by side; each gate is its own fan-out.
      const double fan_out = gru ? w.cols() / 3.0 : static_cast<double>(w.cols());
      const double a = std::sqrt(6.0 / (static_cast<double>(w.rows()) + fan_out));
      std::uniform_real_distribution<double> u(-a, a);
      for (Eigen::Index j = 0; j < w.size(); ++j) w.data()[j] = static_cast<T>(u(rng));
    }
  }
}

// ---------------------------------------------------------------------------- queries

template <typename T>
Mat<T> Grouping<T>::make_queries(const ParameterSet<T>& ps, const Mat<T>& patch_tokens,
                                 std::uint64_t seed, QueryCache<T>& cache) const {
  const int k = cfg_.queries.num_queries;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  switch (cfg_.queries.kind) {
    case QueryKind::learned: return ps.value(queries_);
    case QueryKind::gaussian: {
      cache.noise.resize(k, dim_);
      for (Eigen::Index i = 0; i < cache.noise.size(); ++i) {
        cache.noise.data()[i] = static_cast<T>(normal(rng));
      }
      Mat<T> q = cache.noise.array().rowwise() * ps.value(query_std_).row(0).array();
      q.rowwise() += ps.value(query_mean_).row(0);
      return q;
    }
    case QueryKind::gaussian_mixture: {
      const int c = cfg_.queries.mixture_components;
      std::uniform_int_distribution<int> pick(0, c - 1);
      cache.noise.resize(k, dim_);
      cache.components.resize(static_cast<std::size_t>(k));
      Mat<T> q(k, dim_);
      for (int i = 0; i < k; ++i) {
        const int comp = pick(rng);
        cache.components[static_cast<std::size_t>(i)] = comp;
        for (int d = 0; d < dim_; ++d) cache.noise(i, d) = static_cast<T>(normal(rng));
        q.row(i) = ps.value(query_mean_).row(comp).array() +
                   ps.value(query_std_).row(comp).array() * cache.noise.row(i).array();
      }
      return q;
    }
    case QueryKind::kmeans_init: {
      if (patch_tokens.rows() == 0) throw ConfigError("kmeans_init queries require patch tokens");
      return kmeans(patch_tokens.template cast<double>(), k, cfg_.queries.kmeans_iterations, seed)
          .template cast<T>();
    }
  }
  return {};
}

template <typename T>
void Grouping<T>::queries_backward(ParameterSet<T>& ps, const QueryCache<T>& cache,
                                   const Mat<T>& dq) const {
  switch (cfg_.queries.kind) {
    case QueryKind::learned: ps.grad(queries_) += dq; break;
    case QueryKind::gaussian:
      ps.grad(query_mean_).row(0) += dq.colwise().sum();
      ps.grad(query_std_).row(0) += (dq.array() * cache.noise.array()).colwise().sum().matrix();
      break;
    case QueryKind::gaussian_mixture:
      for (Eigen::Index i = 0; i < dq.rows(); ++i) {
        const int comp = cache.components[static_cast<std::size_t>(i)];
        ps.grad(query_mean_).row(comp) += dq.row(i);
        ps.grad(query_std_).row(comp).array() += dq.row(i).array() * cache.noise.row(i).array();
      }
      break;
    case QueryKind::kmeans_init: break;
  }
}

MatD kmeans(const MatD& points, int k, int iterations, std::uint64_t seed) {
  const Eigen::Index n = points.rows();
  if (k < 1 || n < 1) throw ConfigError("kmeans: need k >= 1 and at least one point");
  std::mt19937_64 rng(seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  MatD centroids(k, points.cols());
  for (int c = 0; c < k; ++c) {
    centroids.row(c) = points.row(order[static_cast<std::size_t>(c) % order.size()]);
  }
  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  std::vector<double> dist(static_cast<std::size_t>(n), 0.0);
  for (int it = 0; it < iterations; ++it) {
    for (Eigen::Index p = 0; p < n; ++p) {
      double best = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int c = 0; c < k; ++c) {
        const double d = (points.row(p) - centroids.row(c)).squaredNorm();
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      assign[static_cast<std::size_t>(p)] = arg;
      dist[static_cast<std::size_t>(p)] = best;
    }
    MatD sums = MatD::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index p = 0; p < n; ++p) {
      sums.row(assign[static_cast<std::size_t>(p)]) += points.row(p);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(p)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centroids.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
        continue;
      }
      auto far = std::max_element(dist.begin(), dist.end()) - dist.begin();
      centroids.row(c) = points.row(far);
      dist[static_cast<std::size_t>(far)] = -1.0;
    }
  }
  return centroids;
}

// ---------------------------------------------------------------------------- cross attention

template <typename T>
SlotSet<T> Grouping<T>::cross_attention(const ParameterSet<T>& ps, const Mat<T>& queries,
                                        const Mat<T>& patch_tokens, GroupingCache<T>& cache) const {
  SlotSet<T> out;
  out.variant = AttentionKind::cross;
  Mat<T> x = queries;
  const std::size_t layers = cross_attn_.size();
  cache.cross.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    auto& c = cache.cross[l];
    Mat<T> qn = cross_ln_q_[l].forward(ps, x, c.ln_q);
    Mat<T> kvn = cross_ln_kv_[l].forward(ps, patch_tokens, c.ln_kv);
    x += cross_attn_[l].forward(ps, qn, kvn, c.attn);
    if (l == 0) out.attention = nn::MultiHeadAttention<T>::mean_attention(c.attn);
    Mat<T> m = cross_ln_mlp_[l].forward(ps, x, c.ln_mlp);
    x += cross_mlp_[l].forward(ps, m, c.mlp);
  }
  out.slots = std::move(x);
  return out;
}

template <typename T>
std::pair<Mat<T>, Mat<T>> Grouping<T>::cross_backward(ParameterSet<T>& ps,
                                                      const GroupingCache<T>& cache,
                                                      const Mat<T>& d_slots) const {
  Mat<T> dx = d_slots;
  Mat<T> dpatches;
  for (std::size_t l = cross_attn_.size(); l-- > 0;) {
    const auto& c = cache.cross[l];
    Mat<T> dm = cross_mlp_[l].backward(ps, c.mlp, dx);
    dx += cross_ln_mlp_[l].backward(ps, c.ln_mlp, dm);
    auto [dqn, dkvn] = cross_attn_[l].backward(ps, c.attn, dx);
    dx += cross_ln_q_[l].backward(ps, c.ln_q, dqn);
    Mat<T> dp = cross_ln_kv_[l].backward(ps, c.ln_kv, dkvn);
    if (dpatches.size() == 0) {
      dpatches = std::move(dp);
    } else {
      dpatches += dp;
    }
  }
  return {std::move(dx), std::move(dpatches)};
}

// ---------------------------------------------------------------------------- slot attention

template <typename T>
SlotSet<T> Grouping<T>::slot_attention(const ParameterSet<T>& ps, const Mat<T>& queries,
                                       const Mat<T>& patch_tokens, GroupingCache<T>& cache) const {
  SlotSet<T> out;
  out.variant = AttentionKind::slot;
  const T scale = T(1) / std::sqrt(static_cast<T>(dim_));
  const T eps = static_cast<T>(cfg_.slot_epsilon);

  cache.inputs_norm = slot_ln_inputs_.forward(ps, patch_tokens, cache.ln_inputs);
  cache.k = slot_k_.forward(ps, cache.inputs_norm);
  cache.v = slot_v_.forward(ps, cache.inputs_norm);

  Mat<T> slots = queries;
  cache.iterations.resize(static_cast<std::size_t>(cfg_.slot_iterations));
  for (int it = 0; it < cfg_.slot_iterations; ++it) {
    auto& c = cache.iterations[static_cast<std::size_t>(it)];
    c.slots_norm = slot_ln_slots_.forward(ps, slots, c.ln_slots);
    c.q = slot_q_.forward(ps, c.slots_norm);
    c.attn = nn::row_exact_product<T>(c.q, cache.k.transpose());
    c.attn *= scale;
    // softmax over the query axis: every patch distributes unit mass across slots. The
    // denominator is summed in sorted order so permuting the queries permutes the result exactly.
    std::vector<T> column(static_cast<std::size_t>(c.attn.rows()));
    for (Eigen::Index n = 0; n < c.attn.cols(); ++n) {
      const T mx = c.attn.col(n).maxCoeff();
      // scalar exp: the vectorized one rounds differently in packet lanes and the tail
      c.attn.col(n) = (c.attn.col(n).array() - mx).unaryExpr([](T v) { return std::exp(v); });
      for (Eigen::Index i = 0; i < c.attn.rows(); ++i) column[static_cast<std::size_t>(i)] = c.attn(i, n);
      std::sort(column.begin(), column.end());
      T total = 0;
      for (T x : column) total += x;
      c.attn.col(n) /= total;
    }
    // plain left-to-right row sums; Eigen's rowwise().sum() vectorizes across rows
    c.row_sums.resize(c.attn.rows());
    for (Eigen::Index i = 0; i < c.attn.rows(); ++i) {
      T total = 0;
      for (Eigen::Index n = 0; n < c.attn.cols(); ++n) total += c.attn(i, n);
      c.row_sums(i) = total + eps;
    }
    c.renorm = c.attn.array().colwise() / c.row_sums.array();
    Mat<T> updates = nn::row_exact_product(c.renorm, cache.v);
    slots = slot_gru_.forward(ps, updates, slots, c.gru);
    if (it == 0) {
      out.attention = c.attn;
      out.renormalized = c.renorm;
    }
  }
  out.slots = std::move(slots);
  return out;
}

template <typename T>
std::pair<Mat<T>, Mat<T>> Grouping<T>::slot_backward(ParameterSet<T>& ps,
                                                     const GroupingCache<T>& cache,
                                                     const Mat<T>& d_slots) const {
  const T scale = T(1) / std::sqrt(static_cast<T>(dim_));
  Mat<T> ds = d_slots;
  Mat<T> dk = Mat<T>::Zero(cache.k.rows(), cache.k.cols());
  Mat<T> dv = Mat<T>::Zero(cache.v.rows(), cache.v.cols());
  for (int it = cfg_.slot_iterations - 1; it >= 0; --it) {
    const auto& c = cache.iterations[static_cast<std::size_t>(it)];
    auto [du, dprev] = slot_gru_.backward(ps, c.gru, ds);
    // u = renorm * v
    Mat<T> drenorm = du * cache.v.transpose();
    dv.noalias() += c.renorm.transpose() * du;
    // renorm_in = attn_in / S_i
    Eigen::Matrix<T, Eigen::Dynamic, 1> inner = (drenorm.array() * c.renorm.array()).rowwise().sum();
    Mat<T> dattn = (drenorm.array().colwise() - inner.array()).colwise() / c.row_sums.array();
    // softmax over columns
    RowVec<T> col_inner = (dattn.array() * c.attn.array()).colwise().sum();
    Mat<T> dlogits = c.attn.array() * (dattn.array().rowwise() - col_inner.array());
    dlogits *= scale;
    Mat<T> dq = dlogits * cache.k;
    dk.noalias() += dlogits.transpose() * c.q;
    Mat<T> dslots_norm = slot_q_.backward(ps, c.slots_norm, dq);
    dprev += slot_ln_slots_.backward(ps, c.ln_slots, dslots_norm);
    ds = std::move(dprev);
  }
  Mat<T> dinputs = slot_k_.backward(ps, cache.inputs_norm, dk);
  dinputs += slot_v_.backward(ps, cache.inputs_norm, dv);
  Mat<T> dpatches = slot_ln_inputs_.backward(ps, cache.ln_inputs, dinputs);
  return {std::move(ds), std::move(dpatches)};
}

// ---------------------------------------------------------------------------- dispatch

template <typename T>
SlotSet<T> Grouping<T>::forward(const ParameterSet<T>& ps, const Mat<T>& patch_tokens,
                                std::uint64_t seed, GroupingCache<T>& cache) const {
  Mat<T> q = make_queries(ps, patch_tokens, seed, cache.queries);
  return cfg_.attention == AttentionKind::slot ? slot_attention(ps, q, patch_tokens, cache)
                                               : cross_attention(ps, q, patch_tokens, cache);
}

template <typename T>
Mat<T> Grouping<T>::backward(ParameterSet<T>& ps, const GroupingCache<T>& cache,
                             const Mat<T>& d_slots) const {
  auto [dq, dpatches] = cfg_.attention == AttentionKind::slot ? slot_backward(ps, cache, d_slots)
                                                              : cross_backward(ps, cache, d_slots);
  queries_backward(ps, cache.queries, dq);
  return dpatches;
}

template class Grouping<float>;
template class Grouping<double>;

}  // namespace osr

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "osr/backbone.hpp"
#include "osr/common.hpp"
#include "osr/nn.hpp"
#include "osr/params.hpp"

namespace osr {

enum class AttentionKind { slot, cross };
enum class QueryKind { learned, gaussian, gaussian_mixture, kmeans_init };

std::string to_string(AttentionKind k);
std::string to_string(QueryKind k);
AttentionKind parse_attention_kind(const std::string& s);
QueryKind parse_query_kind(const std::string& s);

// How the K query tokens seeding the object slots are obtained. Only `learned` trains stably;
// the sampled and k-means strategies are kept for experimentation.
struct QueryStrategy {
  QueryKind kind = QueryKind::learned;
  int num_queries = 7;
  int mixture_components = 4;
  int kmeans_iterations = 10;
};

struct GroupingConfig {
  AttentionKind attention = AttentionKind::slot;
  QueryStrategy queries;
  int cross_layers = 2;
  int cross_heads = 4;
  int cross_mlp_hidden = 128;
  int slot_iterations = 1;
  double slot_epsilon = 1e-8;
  // "xavier": Glorot-uniform projection and GRU weights; "trunc_normal": std 0.02 like the
  // backbone. Queries are always trunc_normal.
  std::string weight_init = "xavier";

  void validate() const;
};

template <typename T>
struct SlotSet {
  Mat<T> slots;      // K x D
  // K x N maps from the first layer/iteration. Slot attention: softmax over the query axis
  // (columns sum to 1). Cross attention: head-averaged softmax over patches (rows sum to 1).
  Mat<T> attention;
  Mat<T> renormalized;  // slot attention only: `attention` with rows rescaled to sum to 1
  AttentionKind variant = AttentionKind::slot;
};

template <typename T>
struct QueryCache {
  Mat<T> noise;                 // K x D standard normal draws (sampled strategies)
  std::vector<int> components;  // mixture component per query
};

template <typename T>
struct CrossLayerCache {
  nn::LayerNormCache<T> ln_q, ln_kv, ln_mlp;
  nn::AttentionCache<T> attn;
  nn::MlpCache<T> mlp;
};

template <typename T>
struct SlotIterationCache {
  nn::LayerNormCache<T> ln_slots;
  Mat<T> slots_norm;
  Mat<T> q;
  Mat<T> attn;    // after query-axis softmax
  Mat<T> renorm;  // after row renormalization
  Eigen::Matrix<T, Eigen::Dynamic, 1> row_sums;
  nn::GruCache<T> gru;
};

template <typename T>
struct GroupingCache {
  QueryCache<T> queries;
  // cross attention
  std::vector<CrossLayerCache<T>> cross;
  // slot attention
  nn::LayerNormCache<T> ln_inputs;
  Mat<T> inputs_norm, k, v;
  std::vector<SlotIterationCache<T>> iterations;
};

// Aggregates patch tokens into K object tokens.
template <typename T>
class Grouping {
 public:
  Grouping() = default;
  Grouping(ParameterSet<T>& ps, const GroupingConfig& cfg, int dim, std::mt19937_64& rng);

  const GroupingConfig& config() const { return cfg_; }

  Mat<T> make_queries(const ParameterSet<T>& ps, const Mat<T>& patch_tokens, std::uint64_t seed,
                      QueryCache<T>& cache) const;
  void queries_backward(ParameterSet<T>& ps, const QueryCache<T>& cache, const Mat<T>& dq) const;

  SlotSet<T> cross_attention(const ParameterSet<T>& ps, const Mat<T>& queries,
                             const Mat<T>& patch_tokens, GroupingCache<T>& cache) const;
  SlotSet<T> slot_attention(const ParameterSet<T>& ps, const Mat<T>& queries,
                            const Mat<T>& patch_tokens, GroupingCache<T>& cache) const;

  // Returns {d_queries, d_patch_tokens}.
  std::pair<Mat<T>, Mat<T>> cross_backward(ParameterSet<T>& ps, const GroupingCache<T>& cache,
                                           const Mat<T>& d_slots) const;
  std::pair<Mat<T>, Mat<T>> slot_backward(ParameterSet<T>& ps, const GroupingCache<T>& cache,
                                          const Mat<T>& d_slots) const;

  // Queries + configured attention variant.
  SlotSet<T> forward(const ParameterSet<T>& ps, const Mat<T>& patch_tokens, std::uint64_t seed,
                     GroupingCache<T>& cache) const;
  // Returns d_patch_tokens; query parameter gradients are accumulated.
  Mat<T> backward(ParameterSet<T>& ps, const GroupingCache<T>& cache, const Mat<T>& d_slots) const;

 private:
  GroupingConfig cfg_;
  int dim_ = 0;
  ParamId queries_;       // learned: K x D
  ParamId query_mean_;    // gaussian: 1 x D; mixture: C x D
  ParamId query_std_;
  std::vector<nn::LayerNorm<T>> cross_ln_q_, cross_ln_kv_, cross_ln_mlp_;
  std::vector<nn::MultiHeadAttention<T>> cross_attn_;
  std::vector<nn::Mlp<T>> cross_mlp_;
  nn::LayerNorm<T> slot_ln_inputs_, slot_ln_slots_;
  nn::Linear<T> slot_q_, slot_k_, slot_v_;
  nn::GruCell<T> slot_gru_;
};

// Euclidean k-means (Lloyd) on the rows of `points`, initialized from K distinct rows drawn with
// `seed`. An empty cluster is re-seeded from the point farthest from its assigned centroid.
MatD kmeans(const MatD& points, int k, int iterations, std::uint64_t seed);

}  // namespace osr

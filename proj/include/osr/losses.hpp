#pragma once

#include <string>
#include <vector>

#include "osr/common.hpp"

namespace osr {

enum class ObjectLoss { ctr_all, ctr_img, cos_sim, none };

std::string to_string(ObjectLoss l);
ObjectLoss parse_object_loss(const std::string& s);

struct LossConfig {
  double temperature = 0.1;
  ObjectLoss object_loss = ObjectLoss::ctr_img;
  bool use_global = true;
  double object_weight = 1.0;
  double global_weight = 1.0;

  void validate() const;
  bool object_enabled() const { return object_loss != ObjectLoss::none; }
};

// Projections of a batch of B images, each seen under two augmentations a in {0, 1}.
// Row layout: p_global row a*B + b; p_obj / s_obj row (a*B + b)*K + i.
template <typename T>
struct BatchProjections {
  int batch = 0;
  int slots = 0;
  Mat<T> p_global;  // 2B x D_p
  Mat<T> p_obj;     // 2BK x D_p
  Mat<T> s_obj;     // 2BK x D (raw slots, used for matching and as CosSim targets)

  int view_index(int a, int b) const { return a * batch + b; }
  int token_index(int a, int b, int i) const { return (a * batch + b) * slots + i; }
};

// sigma[a*B + b][i] = index of the slot in view 1-a of image b paired with slot i of view a.
struct Matchings {
  std::vector<std::vector<int>> sigma;
  int zero_norm_slots = 0;
};

// One Hungarian solve per image (view 0 -> view 1); the reverse direction is the inverse
// permutation.
template <typename T>
Matchings compute_matchings(const BatchProjections<T>& batch);
// Independent solve for each of the 2B (a, b) directions.
template <typename T>
Matchings compute_matchings_per_view(const BatchProjections<T>& batch);

// Losses are means over anchors. When `grad` is non-null it receives d(loss)/d(projections) with
// the shape of the corresponding projection matrix.
template <typename T>
double global_loss(const BatchProjections<T>& batch, double tau, Mat<T>* grad = nullptr);

template <typename T>
double object_loss_contrastive(const BatchProjections<T>& batch, const Matchings& m, double tau,
                               ObjectLoss negatives, Mat<T>* grad = nullptr);

// -cos(p_abi, stopgrad(s_{(1-a) b sigma(i)})). Only the projection side receives gradient.
template <typename T>
double object_loss_cossim(const BatchProjections<T>& batch, const Matchings& m,
                          Mat<T>* grad = nullptr);

// Direct per-anchor evaluation (explicit negative sets, per-view matching); used to cross-check
// the batched implementation.
template <typename T>
double global_loss_reference(const BatchProjections<T>& batch, double tau);
template <typename T>
double object_loss_contrastive_reference(const BatchProjections<T>& batch, const Matchings& m,
                                         double tau, ObjectLoss negatives);
template <typename T>
double object_loss_cossim_reference(const BatchProjections<T>& batch, const Matchings& m);

template <typename T>
struct LossResult {
  double total = 0.0;
  double global = 0.0;  // unweighted term (0 when disabled)
  double object = 0.0;  // unweighted term (0 when disabled)
  Mat<T> d_global;      // gradient of `total` w.r.t. p_global
  Mat<T> d_obj;         // gradient of `total` w.r.t. p_obj
  Matchings matchings;
};

template <typename T>
LossResult<T> total_loss(const BatchProjections<T>& batch, const LossConfig& cfg);

}  // namespace osr

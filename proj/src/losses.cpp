#include "osr/losses.hpp"

#include <cmath>
#include <limits>

#include "osr/assignment.hpp"

namespace osr {

std::string to_string(ObjectLoss l) {
  switch (l) {
    case ObjectLoss::ctr_all: return "ctrall";
    case ObjectLoss::ctr_img: return "ctrimg";
    case ObjectLoss::cos_sim: return "cossim";
    case ObjectLoss::none: return "none";
  }
  return "none";
}

ObjectLoss parse_object_loss(const std::string& s) {
  if (s == "ctrall" || s == "CtrAll") return ObjectLoss::ctr_all;
  if (s == "ctrimg" || s == "CtrImg") return ObjectLoss::ctr_img;
  if (s == "cossim" || s == "CosSim") return ObjectLoss::cos_sim;
  if (s == "none") return ObjectLoss::none;
  throw ConfigError("unknown object loss '" + s + "' (expected ctrall|ctrimg|cossim|none)");
}

void LossConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("losses: temperature must be > 0");
  if (object_weight < 0.0 || global_weight < 0.0) throw ConfigError("losses: weights must be >= 0");
  if (!use_global && object_loss == ObjectLoss::none) {
    throw ConfigError("losses: at least one of the global and object losses must be enabled");
  }
}

namespace {

// Row-normalizes `p`; throws on zero-norm rows.
MatD normalize_rows(const MatD& p, Eigen::VectorXd& norms, const char* what) {
  norms = p.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (!(norms(r) > 0.0) || !std::isfinite(norms(r))) {
      throw NumericError(std::string(what) + ": zero-norm or non-finite vector at row " +
                         std::to_string(r) + " (cosine undefined)");
    }
  }
  return p.array().colwise() / norms.array();
}

// Gradient through row normalization: d p = (d pn - pn * <d pn, pn>) / |p|.
MatD normalize_rows_backward(const MatD& pn, const Eigen::VectorXd& norms, const MatD& dpn) {
  Eigen::VectorXd inner = (dpn.array() * pn.array()).rowwise().sum();
  MatD dp = dpn - (pn.array().colwise() * inner.array()).matrix();
  return dp.array().colwise() / norms.array();
}

// InfoNCE over rows of normalized `pn`. Anchor r is scored against its positive `positive[r]`
// and candidates {c : group[c] == group[r], c != r} (group empty -> all rows). Adds the gradient
// of (sum over anchors / count) w.r.t. pn into `dpn` when non-null.
double info_nce(const MatD& pn, const std::vector<int>& positive, const std::vector<int>& group,
                double tau, double count, MatD* dpn) {
  const Eigen::Index m = pn.rows();
  MatD sim = (pn * pn.transpose()) / tau;
  MatD dsim;
  if (dpn != nullptr) dsim = MatD::Zero(m, m);
  double total = 0.0;
  for (Eigen::Index r = 0; r < m; ++r) {
    const int pos = positive[static_cast<std::size_t>(r)];
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < m; ++c) {
      if (c == r) continue;
      if (!group.empty() && group[static_cast<std::size_t>(c)] != group[static_cast<std::size_t>(r)]) continue;
      mx = std::max(mx, sim(r, c));
    }
    double z = 0.0;
    for (Eigen::Index c = 0; c < m; ++c) {
      if (c == r) continue;
      if (!group.empty() && group[static_cast<std::size_t>(c)] != group[static_cast<std::size_t>(r)]) continue;
      z += std::exp(sim(r, c) - mx);
    }
    const double lse = mx + std::log(z);
    total += lse - sim(r, pos);
    if (dpn != nullptr) {
      for (Eigen::Index c = 0; c < m; ++c) {
        if (c == r) continue;
        if (!group.empty() && group[static_cast<std::size_t>(c)] != group[static_cast<std::size_t>(r)]) continue;
        dsim(r, c) += std::exp(sim(r, c) - lse) / count;
      }
      dsim(r, pos) -= 1.0 / count;
    }
  }
  if (dpn != nullptr) {
    MatD sym = (dsim + dsim.transpose()) / tau;
    dpn->noalias() += sym * pn;
  }
  return total / count;
}

double cosine(const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& y) {
  const double nx = x.norm();
  const double ny = y.norm();
  if (!(nx > 0.0) || !(ny > 0.0)) throw NumericError("cosine of a zero-norm vector is undefined");
  return x.dot(y) / (nx * ny);
}

template <typename T>
void check_matchings(const BatchProjections<T>& batch, const Matchings& m) {
  if (m.sigma.size() != static_cast<std::size_t>(2 * batch.batch)) {
    throw ConfigError("losses: expected one matching per (view, image)");
  }
}

}  // namespace

template <typename T>
Matchings compute_matchings(const BatchProjections<T>& batch) {
  Matchings m;
  const int b_count = batch.batch;
  const int k = batch.slots;
  m.sigma.assign(static_cast<std::size_t>(2 * b_count), {});
  for (int b = 0; b < b_count; ++b) {
    const Mat<T> s0 = batch.s_obj.middleRows(batch.token_index(0, b, 0), k);
    const Mat<T> s1 = batch.s_obj.middleRows(batch.token_index(1, b, 0), k);
    const SlotMatch sm = match_slots(s0, s1);
    m.zero_norm_slots += sm.zero_norm_slots;
    m.sigma[static_cast<std::size_t>(batch.view_index(0, b))] = sm.assignment.sigma;
    m.sigma[static_cast<std::size_t>(batch.view_index(1, b))] = inverse_permutation(sm.assignment.sigma);
  }
  return m;
}

template <typename T>
Matchings compute_matchings_per_view(const BatchProjections<T>& batch) {
  Matchings m;
  const int k = batch.slots;
  m.sigma.assign(static_cast<std::size_t>(2 * batch.batch), {});
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < batch.batch; ++b) {
      const Mat<T> sa = batch.s_obj.middleRows(batch.token_index(a, b, 0), k);
      const Mat<T> sb = batch.s_obj.middleRows(batch.token_index(1 - a, b, 0), k);
      const SlotMatch sm = match_slots(sa, sb);
      m.zero_norm_slots += sm.zero_norm_slots;
      m.sigma[static_cast<std::size_t>(batch.view_index(a, b))] = sm.assignment.sigma;
    }
  }
  return m;
}

template <typename T>
double global_loss(const BatchProjections<T>& batch, double tau, Mat<T>* grad) {
  const int b_count = batch.batch;
  if (b_count < 1) throw ConfigError("global_loss: batch must contain at least one image");
  const MatD p = batch.p_global.template cast<double>();
  Eigen::VectorXd norms;
  const MatD pn = normalize_rows(p, norms, "global_loss");
  std::vector<int> positive(static_cast<std::size_t>(2 * b_count));
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < b_count; ++b) {
      positive[static_cast<std::size_t>(batch.view_index(a, b))] = batch.view_index(1 - a, b);
    }
  }
  MatD dpn;
  if (grad != nullptr) dpn = MatD::Zero(pn.rows(), pn.cols());
  const double loss = info_nce(pn, positive, {}, tau, 2.0 * b_count, grad ? &dpn : nullptr);
  if (grad != nullptr) *grad = normalize_rows_backward(pn, norms, dpn).template cast<T>();
  return loss;
}

template <typename T>
double object_loss_contrastive(const BatchProjections<T>& batch, const Matchings& m, double tau,
                               ObjectLoss negatives, Mat<T>* grad) {
  if (negatives != ObjectLoss::ctr_all && negatives != ObjectLoss::ctr_img) {
    throw ConfigError("object_loss_contrastive: negatives must be ctrall or ctrimg");
  }
  check_matchings(batch, m);
  const int b_count = batch.batch;
  const int k = batch.slots;
  const MatD p = batch.p_obj.template cast<double>();
  Eigen::VectorXd norms;
  const MatD pn = normalize_rows(p, norms, "object_loss");
  const double count = 2.0 * b_count * k;
  MatD dpn;
  if (grad != nullptr) dpn = MatD::Zero(pn.rows(), pn.cols());

  double loss = 0.0;
  if (negatives == ObjectLoss::ctr_all) {
    std::vector<int> positive(static_cast<std::size_t>(2 * b_count * k));
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < b_count; ++b) {
        const auto& sigma = m.sigma[static_cast<std::size_t>(batch.view_index(a, b))];
        for (int i = 0; i < k; ++i) {
          positive[static_cast<std::size_t>(batch.token_index(a, b, i))] =
              batch.token_index(1 - a, b, sigma[static_cast<std::size_t>(i)]);
        }
      }
    }
    loss = info_nce(pn, positive, {}, tau, count, grad ? &dpn : nullptr);
  } else {
    // Each image pair is an independent 2K-token problem: [view 0 slots; view 1 slots].
    std::vector<int> positive(static_cast<std::size_t>(2 * k));
    MatD block(2 * k, pn.cols());
    MatD dblock;
    for (int b = 0; b < b_count; ++b) {
      for (int a = 0; a < 2; ++a) {
        block.middleRows(a * k, k) = pn.middleRows(batch.token_index(a, b, 0), k);
        const auto& sigma = m.sigma[static_cast<std::size_t>(batch.view_index(a, b))];
        for (int i = 0; i < k; ++i) {
          positive[static_cast<std::size_t>(a * k + i)] = (1 - a) * k + sigma[static_cast<std::size_t>(i)];
        }
      }
      if (grad != nullptr) dblock = MatD::Zero(2 * k, pn.cols());
      loss += info_nce(block, positive, {}, tau, count, grad ? &dblock : nullptr);
      if (grad != nullptr) {
        for (int a = 0; a < 2; ++a) dpn.middleRows(batch.token_index(a, b, 0), k) += dblock.middleRows(a * k, k);
      }
    }
  }
  if (grad != nullptr) *grad = normalize_rows_backward(pn, norms, dpn).template cast<T>();
  return loss;
}

template <typename T>
double object_loss_cossim(const BatchProjections<T>& batch, const Matchings& m, Mat<T>* grad) {
  check_matchings(batch, m);
  if (batch.p_obj.cols() != batch.s_obj.cols()) {
    throw ConfigError("object_loss_cossim: projection width " + std::to_string(batch.p_obj.cols()) +
                      " differs from slot width " + std::to_string(batch.s_obj.cols()));
  }
  const int b_count = batch.batch;
  const int k = batch.slots;
  const MatD p = batch.p_obj.template cast<double>();
  const MatD s = batch.s_obj.template cast<double>();
  Eigen::VectorXd pnorms, snorms;
  const MatD pn = normalize_rows(p, pnorms, "object_loss_cossim");
  const MatD sn = normalize_rows(s, snorms, "object_loss_cossim");
  // targets[r] = normalized slot matched to anchor r (treated as a constant)
  MatD targets(pn.rows(), pn.cols());
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < b_count; ++b) {
      const auto& sigma = m.sigma[static_cast<std::size_t>(batch.view_index(a, b))];
      for (int i = 0; i < k; ++i) {
        targets.row(batch.token_index(a, b, i)) =
            sn.row(batch.token_index(1 - a, b, sigma[static_cast<std::size_t>(i)]));
      }
    }
  }
  const double count = 2.0 * b_count * k;
  const double loss = -(pn.array() * targets.array()).sum() / count;
  if (grad != nullptr) {
    const MatD dpn = -targets / count;
    *grad = normalize_rows_backward(pn, pnorms, dpn).template cast<T>();
  }
  return loss;
}

// ---------------------------------------------------------------------------- references

template <typename T>
double global_loss_reference(const BatchProjections<T>& batch, double tau) {
  const MatD p = batch.p_global.template cast<double>();
  const int b_count = batch.batch;
  double total = 0.0;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < b_count; ++b) {
      const Eigen::RowVectorXd anchor = p.row(a * b_count + b);
      const double pos = std::exp(cosine(anchor, p.row((1 - a) * b_count + b)) / tau);
      double denom = 0.0;
      for (int a2 = 0; a2 < 2; ++a2) {
        for (int b2 = 0; b2 < b_count; ++b2) {
          if (a2 == a && b2 == b) continue;
          denom += std::exp(cosine(anchor, p.row(a2 * b_count + b2)) / tau);
        }
      }
      total += -std::log(pos / denom);
    }
  }
  return total / (2.0 * b_count);
}

template <typename T>
double object_loss_contrastive_reference(const BatchProjections<T>& batch, const Matchings& m,
                                         double tau, ObjectLoss negatives) {
  check_matchings(batch, m);
  const MatD p = batch.p_obj.template cast<double>();
  const int b_count = batch.batch;
  const int k = batch.slots;
  double total = 0.0;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < b_count; ++b) {
      const auto& sigma = m.sigma[static_cast<std::size_t>(a * b_count + b)];
      for (int i = 0; i < k; ++i) {
        const Eigen::RowVectorXd anchor = p.row((a * b_count + b) * k + i);
        const int pa = 1 - a;
        const int pi = sigma[static_cast<std::size_t>(i)];
        const double pos = std::exp(cosine(anchor, p.row((pa * b_count + b) * k + pi)) / tau);
        double denom = pos;
        for (int a2 = 0; a2 < 2; ++a2) {
          for (int b2 = 0; b2 < b_count; ++b2) {
            for (int i2 = 0; i2 < k; ++i2) {
              const bool is_anchor = a2 == a && b2 == b && i2 == i;
              const bool is_positive = a2 == pa && b2 == b && i2 == pi;
              if (is_anchor || is_positive) continue;
              if (negatives == ObjectLoss::ctr_img && b2 != b) continue;
              denom += std::exp(cosine(anchor, p.row((a2 * b_count + b2) * k + i2)) / tau);
            }
          }
        }
        total += -std::log(pos / denom);
      }
    }
  }
  return total / (2.0 * b_count * k);
}

template <typename T>
double object_loss_cossim_reference(const BatchProjections<T>& batch, const Matchings& m) {
  check_matchings(batch, m);
  const MatD p = batch.p_obj.template cast<double>();
  const MatD s = batch.s_obj.template cast<double>();
  const int b_count = batch.batch;
  const int k = batch.slots;
  double total = 0.0;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < b_count; ++b) {
      const auto& sigma = m.sigma[static_cast<std::size_t>(a * b_count + b)];
      for (int i = 0; i < k; ++i) {
        total -= cosine(p.row((a * b_count + b) * k + i),
                        s.row(((1 - a) * b_count + b) * k + sigma[static_cast<std::size_t>(i)]));
      }
    }
  }
  return total / (2.0 * b_count * k);
}

template <typename T>
LossResult<T> total_loss(const BatchProjections<T>& batch, const LossConfig& cfg) {
  cfg.validate();
  LossResult<T> out;
  if (cfg.use_global) {
    out.global = global_loss(batch, cfg.temperature, &out.d_global);
    out.d_global *= static_cast<T>(cfg.global_weight);
    out.total += cfg.global_weight * out.global;
  } else {
    out.d_global = Mat<T>::Zero(batch.p_global.rows(), batch.p_global.cols());
  }
  if (cfg.object_enabled()) {
    out.matchings = compute_matchings(batch);
    if (cfg.object_loss == ObjectLoss::cos_sim) {
      out.object = object_loss_cossim(batch, out.matchings, &out.d_obj);
    } else {
      out.object = object_loss_contrastive(batch, out.matchings, cfg.temperature, cfg.object_loss,
                                           &out.d_obj);
    }
    out.d_obj *= static_cast<T>(cfg.object_weight);
    out.total += cfg.object_weight * out.object;
  } else {
    out.d_obj = Mat<T>::Zero(batch.p_obj.rows(), batch.p_obj.cols());
  }
  return out;
}

#define OSR_LOSSES_INSTANTIATE(T)                                                                  \
  template Matchings compute_matchings<T>(const BatchProjections<T>&);                             \
  template Matchings compute_matchings_per_view<T>(const BatchProjections<T>&);                    \
  template double global_loss<T>(const BatchProjections<T>&, double, Mat<T>*);                     \
  template double object_loss_contrastive<T>(const BatchProjections<T>&, const Matchings&, double, \
                                             ObjectLoss, Mat<T>*);                                 \
  template double object_loss_cossim<T>(const BatchProjections<T>&, const Matchings&, Mat<T>*);    \
  template double global_loss_reference<T>(const BatchProjections<T>&, double);                    \
  template double object_loss_contrastive_reference<T>(const BatchProjections<T>&,                 \
                                                       const Matchings&, double, ObjectLoss);      \
  template double object_loss_cossim_reference<T>(const BatchProjections<T>&, const Matchings&);   \
  template LossResult<T> total_loss<T>(const BatchProjections<T>&, const LossConfig&);

OSR_LOSSES_INSTANTIATE(float)
OSR_LOSSES_INSTANTIATE(double)

}  // namespace osr

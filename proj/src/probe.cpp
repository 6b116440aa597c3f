#include "osr/probe.hpp"

#include <cmath>
#include <random>

#include "osr/evalsuite.hpp"

namespace osr {

void ProbeConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("probe: lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("probe: weight_decay must be >= 0");
  if (steps < 0) throw ConfigError("probe: steps must be >= 0");
  if (batch_size < 1) throw ConfigError("probe: batch_size must be >= 1");
  if (max_pos_weight < 1.0) throw ConfigError("probe: max_pos_weight must be >= 1");
}

RowVec<double> LinearProbe::logits(const MatF& features) const {
  MatD x = features.cast<double>();
  x = (x.rowwise() - mean).array().rowwise() * inv_std.array();
  MatD z = x * weight;
  z.rowwise() += bias;
  return z.colwise().maxCoeff();
}

MatD LinearProbe::predict(const std::vector<MatF>& features) const {
  MatD out(kNumQuestions, static_cast<Eigen::Index>(features.size()));
  for (std::size_t m = 0; m < features.size(); ++m) {
    const RowVec<double> z = logits(features[m]);
    for (int q = 0; q < kNumQuestions; ++q) out(q, static_cast<Eigen::Index>(m)) = 1.0 / (1.0 + std::exp(-z(q)));
  }
  return out;
}

MatD label_matrix(const std::vector<const SceneSample*>& samples) {
  MatD y(static_cast<Eigen::Index>(samples.size()), kNumQuestions);
  for (std::size_t m = 0; m < samples.size(); ++m) {
    const auto bits = vqa_labels(samples[m]->attributes);
    for (int q = 0; q < kNumQuestions; ++q) y(static_cast<Eigen::Index>(m), q) = bits[q];
  }
  return y;
}

namespace {
// log(1 + exp(z)) without overflow
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
}  // namespace

ProbeReport train_probe(const std::vector<MatF>& features, const MatD& labels, const ProbeConfig& cfg) {
  cfg.validate();
  if (features.empty()) throw ConfigError("probe: no training images");
  if (labels.rows() != static_cast<Eigen::Index>(features.size()) || labels.cols() != kNumQuestions) {
    throw ConfigError("probe: label matrix must be images x 96");
  }
  const Eigen::Index F = features[0].cols();
  ProbeReport rep;
  LinearProbe& probe = rep.probe;

  // Standardization statistics over all rows.
  RowVec<double> sum = RowVec<double>::Zero(F), sq = RowVec<double>::Zero(F);
  double rows = 0.0;
  for (const auto& f : features) {
    if (f.cols() != F) throw ConfigError("probe: inconsistent feature widths");
    const MatD x = f.cast<double>();
    sum += x.colwise().sum();
    sq += x.array().square().matrix().colwise().sum();
    rows += static_cast<double>(x.rows());
  }
  probe.mean = sum / rows;
  RowVec<double> var = (sq / rows).array() - probe.mean.array().square();
  probe.inv_std = (var.array().max(0.0) + 1e-6).rsqrt().matrix();

  // Inverse-frequency positive weights.
  RowVec<double> pos_weight(kNumQuestions);
  for (int q = 0; q < kNumQuestions; ++q) {
    const double pos = labels.col(q).sum();
    const double neg = static_cast<double>(labels.rows()) - pos;
    if (pos == 0.0) {
      ++rep.degenerate_questions;
      pos_weight(q) = cfg.max_pos_weight;
    } else {
      pos_weight(q) = std::clamp(neg / pos, 1.0, cfg.max_pos_weight);
    }
  }

  std::vector<MatD> xs;
  xs.reserve(features.size());
  for (const auto& f : features) {
    MatD x = f.cast<double>();
    xs.push_back((x.rowwise() - probe.mean).array().rowwise() * probe.inv_std.array());
  }

  probe.weight = MatD::Zero(F, kNumQuestions);
  probe.bias = RowVec<double>::Zero(kNumQuestions);
  MatD mw = MatD::Zero(F, kNumQuestions), vw = mw;
  RowVec<double> mb = probe.bias, vb = probe.bias;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x9B0B));
  std::uniform_int_distribution<std::size_t> pick(0, features.size() - 1);
  const int B = cfg.batch_size;

  for (int step = 0; step < cfg.steps; ++step) {
    MatD gw = MatD::Zero(F, kNumQuestions);
    RowVec<double> gb = RowVec<double>::Zero(kNumQuestions);
    double loss = 0.0;
    for (int i = 0; i < B; ++i) {
      const std::size_t m = pick(rng);
      const MatD& x = xs[m];
      MatD z = x * probe.weight;
      z.rowwise() += probe.bias;
      for (int q = 0; q < kNumQuestions; ++q) {
        Eigen::Index k;
        const double zq = z.col(q).maxCoeff(&k);
        const double y = labels(static_cast<Eigen::Index>(m), q);
        const double w = y > 0.5 ? pos_weight(q) : 1.0;
        const double p = 1.0 / (1.0 + std::exp(-zq));
        loss += y > 0.5 ? w * softplus(-zq) : softplus(zq);
        const double dz = (y > 0.5 ? w * (p - 1.0) : p) / (B * kNumQuestions);
        gw.col(q) += dz * x.row(k).transpose();
        gb(q) += dz;
      }
    }
    rep.final_loss = loss / (B * kNumQuestions);
    const double t = step + 1;
    const double a = cfg.lr * std::sqrt(1.0 - std::pow(b2, t)) / (1.0 - std::pow(b1, t));
    mw = b1 * mw + (1 - b1) * gw;
    vw = b2 * vw + (1 - b2) * gw.cwiseProduct(gw);
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb + (1 - b2) * gb.cwiseProduct(gb);
    probe.weight *= 1.0 - cfg.lr * cfg.weight_decay;
    probe.weight.array() -= a * mw.array() / (vw.array().sqrt() + eps);
    probe.bias.array() -= a * mb.array() / (vb.array().sqrt() + eps);
  }
  return rep;
}

}  // namespace osr

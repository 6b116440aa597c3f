#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "osr/losses.hpp"
#include "osr/model.hpp"

using namespace osr;

namespace {

Image random_image(std::mt19937_64& rng, int side) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Image img(side, side);
  for (auto& v : img.data) v = u(rng);
  return img;
}

BackboneConfig tiny_backbone(bool cls = false, int pos_grid = 0) {
  BackboneConfig b;
  b.image_size = 8;
  b.patch_size = 4;
  b.embed_dim = 8;
  b.num_layers = 2;
  b.num_heads = 2;
  b.mlp_hidden = 16;
  b.use_cls_token = cls;
  b.pos_grid = pos_grid;
  return b;
}

ModelConfig tiny_model(AttentionKind att, bool global_only = false) {
  ModelConfig m;
  m.backbone = tiny_backbone(global_only);
  m.grouping.attention = att;
  m.grouping.queries.num_queries = 3;
  m.grouping.cross_layers = 2;
  m.grouping.cross_heads = 2;
  m.grouping.cross_mlp_hidden = 16;
  m.heads.proj_dim = 8;
  m.heads.global_dim = 6;
  m.global_only = global_only;
  return m;
}

// Spread parameters so the finite-difference test is not dominated by near-linear behavior.
void perturb(ParameterSet<double>& ps, std::mt19937_64& rng, double scale) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& v = ps.value_at(i);
    v += oracle::random_matrix(rng, static_cast<int>(v.rows()), static_cast<int>(v.cols()), scale);
  }
}

}  // namespace

TEST_CASE("patchify is row-major over patches and (py, px, c) inside a patch") {
  Image img(4, 6);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 6; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(100 * y + 10 * x + c);
    }
  }
  MatD p = patchify<double>(img, 2);
  REQUIRE(p.rows() == 6);
  REQUIRE(p.cols() == 12);
  // patch (row 1, col 2) -> index 5; its (py=1, px=0, c=2) entry sits at (1*2+0)*3+2 = 8
  CHECK(p(5, 8) == 100 * 3 + 10 * 4 + 2);
  CHECK(p(0, 0) == 0);
  CHECK_THROWS_AS(patchify<double>(img, 4), ConfigError);
}

TEST_CASE("positional grid resampling") {
  CHECK(grid_resample_matrix(4, 4).isIdentity());
  MatD up = grid_resample_matrix(2, 4);
  CHECK(up.rowwise().sum().isApprox(MatD::Ones(16, 1)));
  // A constant table stays constant; a table varying along x keeps its ordering.
  CHECK((up * MatD::Constant(4, 1, 3.0)).isApprox(MatD::Constant(16, 1, 3.0)));
  MatD ramp(4, 1);
  ramp << 0, 1, 0, 1;
  MatD r = up * ramp;
  CHECK(r(0) <= r(1));
  CHECK(r(1) <= r(2));
  CHECK(r(2) <= r(3));
}

TEST_CASE("backbone gradients match finite differences") {
  for (auto [cls, grid] : {std::pair{false, 0}, std::pair{true, 0}, std::pair{false, 3}}) {
    std::mt19937_64 rng(40 + cls + grid);
    ParameterSet<double> ps;
    Backbone<double> bb(ps, tiny_backbone(cls, grid), rng);
    perturb(ps, rng, 0.3);
    const Image img = random_image(rng, 8);
    const MatD w = oracle::random_matrix(rng, 4, 8);
    const MatD wc = oracle::random_matrix(rng, 1, 8);
    auto loss = [&] {
      BackboneCache<double> c;
      auto out = bb.encode(ps, img, c);
      double l = (out.tokens.array() * w.array()).sum();
      if (cls) l += (out.cls.array() * wc.array()).sum();
      return l;
    };
    auto accumulate = [&] {
      BackboneCache<double> c;
      bb.encode(ps, img, c);
      RowVec<double> dcls = wc;
      bb.backward(ps, c, w, cls ? &dcls : nullptr);
    };
    std::string worst;
    { const double e = gradcheck::max_param_error(ps, loss, accumulate, &worst); CHECK_MESSAGE(e < 1e-4, worst << " " << e); }
  }
}

TEST_CASE("backbone rejects non-finite activations") {
  std::mt19937_64 rng(1);
  ParameterSet<double> ps;
  Backbone<double> bb(ps, tiny_backbone(), rng);
  Image img = random_image(rng, 8);
  img.data[5] = std::numeric_limits<float>::quiet_NaN();
  BackboneCache<double> c;
  CHECK_THROWS_AS(bb.encode(ps, img, c), NumericError);
}

TEST_CASE("heads: zero weights, shared weights, permutation invariance") {
  std::mt19937_64 rng(2);
  HeadsConfig hc{8, 6};
  ParameterSet<double> ps;
  Heads<double> heads(ps, hc, 8, true, rng);
  perturb(ps, rng, 0.3);
  MatD slots = oracle::random_matrix(rng, 5, 8);
  HeadsCache<double> c;

  MatD same(3, 8);
  same.rowwise() = slots.row(0);
  MatD p_same = heads.project_objects(ps, same, c);
  CHECK(p_same.row(1) == p_same.row(0));
  CHECK(p_same.row(2) == p_same.row(0));

  MatD perm = slots;
  perm.row(0) = slots.row(3);
  perm.row(3) = slots.row(4);
  perm.row(4) = slots.row(0);
  auto g1 = heads.global_branch(ps, slots, c);
  auto g2 = heads.global_branch(ps, perm, c);
  CHECK(g1.repr == g2.repr);
  CHECK(g1.proj == g2.proj);
  MatD p1 = heads.project_objects(ps, slots, c), p2 = heads.project_objects(ps, perm, c);
  CHECK(p2.row(0) == p1.row(3));
  CHECK(p2.row(4) == p1.row(0));

  // K identical slots: the mean is the slot itself.
  MatD one = slots.topRows(1);
  CHECK(heads.global_branch(ps, same, c).repr.isApprox(heads.global_branch(ps, one, c).repr, 1e-14));

  for (std::size_t i = 0; i < ps.size(); ++i) ps.value_at(i).setZero();
  CHECK(heads.project_objects(ps, slots, c).isZero());
}

TEST_CASE("heads gradients match finite differences") {
  std::mt19937_64 rng(3);
  ParameterSet<double> ps;
  Heads<double> heads(ps, HeadsConfig{5, 7}, 8, true, rng);
  perturb(ps, rng, 0.4);
  MatD slots = oracle::random_matrix(rng, 4, 8);
  const MatD wo = oracle::random_matrix(rng, 4, 5);
  const MatD wg = oracle::random_matrix(rng, 1, 5);
  const MatD wr = oracle::random_matrix(rng, 1, 7);
  auto loss = [&] {
    HeadsCache<double> c;
    MatD p = heads.project_objects(ps, slots, c);
    auto g = heads.global_branch(ps, slots, c);
    return (p.array() * wo.array()).sum() + (g.proj.array() * wg.array()).sum() + (g.repr.array() * wr.array()).sum();
  };
  MatD dslots;
  auto accumulate = [&] {
    HeadsCache<double> c;
    heads.project_objects(ps, slots, c);
    heads.global_branch(ps, slots, c);
    RowVec<double> dg = wg, dr = wr;
    dslots = heads.project_objects_backward(ps, c, wo) + heads.global_backward(ps, c, dg, &dr);
  };
  std::string worst;
  { const double e = gradcheck::max_param_error(ps, loss, accumulate, &worst); CHECK_MESSAGE(e < 1e-6, worst << " " << e); }
  CHECK(oracle::gradient_relative_error(loss, slots, dslots) < 1e-6);
}

namespace {

// Full pipeline on a batch of two image pairs: model forward for the four views, the configured
// loss, and backpropagation into the parameters.
struct PipelineCheck {
  Model<double> model;
  std::vector<Image> views;
  LossConfig loss;
  // CosSim treats the raw-slot targets as constants; they are frozen here so the finite-difference
  // objective is exactly the stop-gradient objective.
  MatD frozen_targets;
  Matchings frozen_matchings;

  BatchProjections<double> forward(std::vector<ModelCache<double>>& caches) const {
    const int B = 2;
    const auto& cfg = model.config();
    const int K = cfg.global_only ? 0 : cfg.grouping.queries.num_queries;
    BatchProjections<double> b;
    b.batch = B;
    b.slots = K;
    b.p_global.resize(2 * B, cfg.heads.proj_dim);
    b.p_obj.resize(2 * B * K, cfg.heads.proj_dim);
    b.s_obj.resize(2 * B * K, cfg.backbone.embed_dim);
    caches.resize(4);
    for (int v = 0; v < 4; ++v) {
      auto out = model.forward(views[v], 1, caches[v]);
      b.p_global.row(v) = out.global.proj;
      if (K) {
        b.p_obj.middleRows(v * K, K) = out.object_proj;
        b.s_obj.middleRows(v * K, K) = out.slots.slots;
      }
    }
    return b;
  }

  double value() const {
    std::vector<ModelCache<double>> caches;
    auto b = forward(caches);
    double total = loss.use_global ? loss.global_weight * global_loss(b, loss.temperature) : 0.0;
    if (loss.object_loss == ObjectLoss::cos_sim) {
      b.s_obj = frozen_targets;
      total += loss.object_weight * object_loss_cossim(b, frozen_matchings);
    } else if (loss.object_enabled()) {
      total += loss.object_weight * object_loss_contrastive(b, frozen_matchings, loss.temperature, loss.object_loss);
    }
    return total;
  }

  void accumulate() {
    std::vector<ModelCache<double>> caches;
    auto b = forward(caches);
    auto r = total_loss(b, loss);
    const int K = b.slots;
    for (int v = 0; v < 4; ++v) {
      MatD d_obj = K ? MatD(r.d_obj.middleRows(v * K, K)) : MatD();
      model.backward(caches[v], d_obj, r.d_global.row(v));
    }
  }
};

}  // namespace

TEST_CASE("end-to-end model gradients match finite differences") {
  struct Case {
    AttentionKind att;
    ObjectLoss loss;
    bool use_global;
    bool global_only;
  };
  const std::vector<Case> cases{{AttentionKind::slot, ObjectLoss::ctr_img, true, false},
                                {AttentionKind::slot, ObjectLoss::ctr_all, false, false},
                                {AttentionKind::slot, ObjectLoss::cos_sim, true, false},
                                {AttentionKind::cross, ObjectLoss::ctr_img, true, false},
                                {AttentionKind::slot, ObjectLoss::none, true, true}};
  for (const auto& cs : cases) {
    std::mt19937_64 rng(50 + static_cast<int>(cs.loss));
    PipelineCheck pc{Model<double>(tiny_model(cs.att, cs.global_only), 3), {}, {}, {}, {}};
    perturb(pc.model.params(), rng, 0.2);
    for (int v = 0; v < 4; ++v) pc.views.push_back(random_image(rng, 8));
    pc.loss.temperature = 0.5;
    pc.loss.object_loss = cs.loss;
    pc.loss.use_global = cs.use_global;
    {
      std::vector<ModelCache<double>> caches;
      auto b = pc.forward(caches);
      pc.frozen_targets = b.s_obj;
      if (cs.loss != ObjectLoss::none) pc.frozen_matchings = compute_matchings(b);
    }
    std::string worst;
    const double err = gradcheck::max_param_error(
        pc.model.params(), [&] { return pc.value(); }, [&] { pc.accumulate(); }, &worst);
    CHECK_MESSAGE(err < 1e-4, to_string(cs.loss) << " " << to_string(cs.att) << " worst: " << worst << " " << err);
  }
}

TEST_CASE("model adopts parameters by name and shape") {
  Model<float> a(tiny_model(AttentionKind::slot), 1);
  Model<float> b(tiny_model(AttentionKind::slot), a.params());
  CHECK(b.params().value_at(0) == a.params().value_at(0));
  ParameterSet<float> wrong;
  std::mt19937_64 rng(0);
  wrong.add("backbone.embed.weight", 2, 2, Init::zeros, rng);
  CHECK_THROWS_AS(Model<float>(tiny_model(AttentionKind::slot), wrong), ConfigError);
  ModelConfig bad = tiny_model(AttentionKind::slot, true);
  bad.backbone.use_cls_token = false;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("patchify examples") {
  std::mt19937_64 rng(4);
  Image small = random_image(rng, 4);
  MatD one = patchify<double>(small, 4);
  REQUIRE(one.rows() == 1);
  for (int i = 0; i < 48; ++i) CHECK(one(0, i) == static_cast<double>(small.data[i]));

  Image flat(16, 16, 0.25f);
  MatD p = patchify<double>(flat, 4);
  CHECK(p.rows() == 16);
  CHECK(p.cols() == 48);
  for (int r = 1; r < 16; ++r) CHECK(p.row(r) == p.row(0));
  CHECK(patchify<double>(Image(128, 128), 4).rows() == 1024);
}

TEST_CASE("backbone output shape, attention rows and patch equivariance") {
  std::mt19937_64 rng(5);
  BackboneConfig cfg = tiny_backbone();
  cfg.image_size = 16;
  ParameterSet<double> ps;
  Backbone<double> bb(ps, cfg, rng);
  perturb(ps, rng, 0.2);
  const Image img = random_image(rng, 16);
  const MatD patches = patchify<double>(img, 4);
  const MatD pos = bb.positional(ps);
  BackboneCache<double> c1;
  auto out = bb.encode_patches(ps, patches, pos, c1);
  CHECK(out.tokens.rows() == 16);
  CHECK(out.tokens.cols() == 8);
  CHECK(out.grid_rows == 4);
  for (const auto& layer : c1.layers) {
    for (const auto& pr : layer.attn.probs) {
      CHECK((pr.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    }
  }

  std::vector<int> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  MatD pp(16, patches.cols()), ppos(16, pos.cols());
  for (int i = 0; i < 16; ++i) {
    pp.row(i) = patches.row(perm[i]);
    ppos.row(i) = pos.row(perm[i]);
  }
  BackboneCache<double> c2;
  auto permuted = bb.encode_patches(ps, pp, ppos, c2);
  double worst = 0;
  for (int i = 0; i < 16; ++i) {
    worst = std::max(worst, (permuted.tokens.row(i) - out.tokens.row(perm[i])).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-12);

  BackboneCache<double> c3;
  CHECK(bb.encode(ps, img, c3).tokens == out.tokens);
}

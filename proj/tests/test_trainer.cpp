#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "osr/checkpoint.hpp"
#include "osr/dataset.hpp"
#include "osr/trainer.hpp"
#include "temp_dir.hpp"

using namespace osr;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Tiny {
  Dataset data;
  ModelConfig model;
  LossConfig loss;
  AugmentConfig aug;
  TrainConfig train;

  Tiny(std::size_t n = 48, AttentionKind att = AttentionKind::slot, ObjectLoss obj = ObjectLoss::ctr_img) {
    GeneratorSpec g;
    g.image_size = 32;
    g.small_radius = 3;
    g.large_radius = 5;
    g.min_objects = 1;
    g.max_objects = 3;
    data = generate_dataset(g, n, 21, {{"train", 0.75}, {"val", 0.25}});
    model.backbone.image_size = 32;
    model.backbone.patch_size = 8;
    model.backbone.embed_dim = 16;
    model.backbone.num_heads = 2;
    model.backbone.mlp_hidden = 32;
    model.grouping.attention = att;
    model.grouping.queries.num_queries = 4;
    model.grouping.cross_heads = 2;
    model.grouping.cross_mlp_hidden = 32;
    model.heads.proj_dim = 16;
    model.heads.global_dim = 16;
    loss.object_loss = obj;
    aug.output_size = 32;
    train.batch_size = 8;
    train.epochs = 3;
    train.warmup_epochs = 1;
    train.seed = 3;
  }
  std::vector<const SceneSample*> train_set() const { return data.split("train"); }
  std::vector<const SceneSample*> val_set() const { return data.split("val"); }
  TrainResult run(const TrainOptions& opts = {}) const {
    return osr::train(train_set(), val_set(), model, loss, aug, train, opts);
  }
};

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;  // 2 warmup epochs of 10, 7e-4 -> 3e-4
  const long spe = 156;
  CHECK(lr_schedule(0, spe, c) == 0.0);
  CHECK(lr_schedule(2 * spe, spe, c) == 7e-4);
  CHECK(lr_schedule(10 * spe, spe, c) == 3e-4);
  CHECK(lr_schedule(spe, spe, c) == doctest::Approx(3.5e-4).epsilon(1e-12));
  // continuity at the boundary, from both sides
  CHECK(std::abs(lr_schedule(2 * spe - 1, spe, c) + 7e-4 / (2 * spe) - 7e-4) < 1e-12);
  const double right = lr_schedule(2 * spe + 1, spe, c);
  CHECK(std::abs(right - 7e-4) < 1e-8);
  CHECK(right < 7e-4);
  // monotone on each side
  for (long s = 1; s <= 10 * spe; ++s) {
    if (s <= 2 * spe) {
      CHECK(lr_schedule(s, spe, c) > lr_schedule(s - 1, spe, c));
    } else {
      CHECK(lr_schedule(s, spe, c) <= lr_schedule(s - 1, spe, c));
    }
  }
  CHECK(lr_schedule(10 * spe + 50, spe, c) == 3e-4);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.warmup_epochs = c.epochs;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr_final = 1e-3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr_final = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("steps per epoch and weight-decay selection") {
  CHECK(steps_per_epoch(5000, 32) == 156);
  CHECK(steps_per_epoch(64, 32) == 2);
  CHECK(steps_per_epoch(10, 32) == 1);
  CHECK(decays("backbone.layer0.mlp.fc1.weight"));
  CHECK(decays("grouping.slot.gru.w_input"));
  CHECK_FALSE(decays("backbone.layer0.mlp.fc1.bias"));
  CHECK_FALSE(decays("backbone.layer0.norm1.gamma"));
  CHECK_FALSE(decays("grouping.queries"));
  CHECK_FALSE(decays("backbone.pos_embed"));
}

TEST_CASE("AdamW at lr 0 leaves parameters and only moves the moments") {
  std::mt19937_64 rng(1);
  ParameterSet<float> ps;
  ps.add("a.weight", 3, 4, Init::trunc_normal, rng);
  ps.add("a.bias", 1, 4, Init::trunc_normal, rng);
  for (std::size_t i = 0; i < ps.size(); ++i) ps.grad_at(i).setConstant(0.5f);
  const MatF w0 = ps.value_at(0), b0 = ps.value_at(1);
  AdamW opt(ps);
  opt.step(ps, 0.0, TrainConfig{});
  CHECK(ps.value_at(0) == w0);
  CHECK(ps.value_at(1) == b0);
  CHECK(opt.t == 1);
  CHECK(opt.m[0].isApproxToConstant(0.05f));
  CHECK(opt.v[0](2, 3) == doctest::Approx(0.00025).epsilon(1e-3));  // 1 - beta2 rounds in float
}

TEST_CASE("AdamW first step moves each weight by about lr") {
  std::mt19937_64 rng(2);
  ParameterSet<float> ps;
  ps.add("w.weight", 2, 2, Init::zeros, rng);
  ps.grad_at(0) << 1.0f, -2.0f, 0.0f, 3.0f;
  AdamW opt(ps);
  TrainConfig c;
  opt.step(ps, 1e-3, c);
  CHECK(ps.value_at(0)(0, 0) == doctest::Approx(-1e-3).epsilon(1e-4));
  CHECK(ps.value_at(0)(0, 1) == doctest::Approx(1e-3).epsilon(1e-4));
  CHECK(ps.value_at(0)(1, 0) == 0.0f);
}

TEST_CASE("gradient clipping") {
  std::mt19937_64 rng(3);
  ParameterSet<float> ps;
  ps.add("x", 1, 2, Init::zeros, rng);
  ps.add("y", 1, 1, Init::zeros, rng);
  ps.grad_at(0) << 3.0f, 0.0f;
  ps.grad_at(1) << 4.0f;
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK(ps.grad_at(0)(0, 0) == doctest::Approx(0.6).epsilon(1e-5));
  CHECK(ps.grad_at(1)(0, 0) == doctest::Approx(0.8).epsilon(1e-5));
  ps.grad_at(0) << 0.3f, 0.0f;
  ps.grad_at(1) << 0.4f;
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(0.5));
  CHECK(ps.grad_at(1)(0, 0) == 0.4f);
}

TEST_CASE("one step at lr 0 keeps the initial parameters") {
  Tiny t;
  TempDir tmp("lr0");
  TrainOptions o;
  o.out_dir = tmp.path;
  o.stop_after_steps = 1;
  auto r = t.run(o);
  CHECK(r.steps == 1);
  CHECK(r.log.front().lr == 0.0);
  Model<float> init(t.model, derive_seed(t.train.seed, 0x1417));
  for (std::size_t i = 0; i < init.params().size(); ++i) CHECK(r.params.value_at(i) == init.params().value_at(i));
  const auto ckpt = load_checkpoint(r.last_checkpoint);
  double moment = 0;
  for (const auto& [name, m] : ckpt.tensors) {
    if (name.rfind("adam.m/", 0) == 0) moment += m.cwiseAbs().sum();
  }
  CHECK(moment > 0);
}

TEST_CASE("same seed gives identical metrics logs; resume is bit-identical") {
  Tiny t;
  TempDir a("det-a"), b("det-b"), c("det-c");
  TrainOptions o;
  o.log_wall_time = false;
  o.out_dir = a.path;
  auto ra = t.run(o);
  o.out_dir = b.path;
  auto rb = t.run(o);
  CHECK(slurp(a.path / "metrics.jsonl") == slurp(b.path / "metrics.jsonl"));
  CHECK(ra.steps == 12);  // 36 train images, B = 8
  CHECK(ra.val_losses.size() == 3);

  for (long stop : {4L, 6L}) {  // mid-epoch and on an epoch boundary
    std::filesystem::remove_all(c.path);
    TrainOptions first = o;
    first.out_dir = c.path;
    first.stop_after_steps = stop;
    auto partial = t.run(first);
    CHECK(partial.steps == stop);
    TrainOptions rest = o;
    rest.out_dir = c.path;
    rest.resume_from = c.path / "ckpt_last.bin";
    auto resumed = t.run(rest);
    CHECK(resumed.steps == ra.steps);
    for (std::size_t i = 0; i < ra.params.size(); ++i) CHECK(resumed.params.value_at(i) == ra.params.value_at(i));
    CHECK(slurp(c.path / "metrics.jsonl") == slurp(a.path / "metrics.jsonl"));
    CHECK(resumed.best_val == ra.best_val);
  }
  CHECK(std::filesystem::exists(a.path / "ckpt_best.bin"));
}

TEST_CASE("objects-only training logs the object loss only") {
  Tiny t;
  t.loss.use_global = false;
  t.train.epochs = 2;
  TempDir tmp("obj");
  TrainOptions o;
  o.out_dir = tmp.path;
  t.run(o);
  std::ifstream in(tmp.path / "metrics.jsonl");
  std::string line;
  int steps = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    if (j["kind"] != "step") continue;
    ++steps;
    CHECK(j.contains("object"));
    CHECK_FALSE(j.contains("global"));
  }
  CHECK(steps == 8);
}

TEST_CASE("global-only model: no object term in the log; bad combinations rejected") {
  Tiny t;
  t.model.global_only = true;
  t.model.backbone.use_cls_token = true;
  t.loss.object_loss = ObjectLoss::none;
  t.train.epochs = 2;
  TempDir tmp("glob");
  TrainOptions o;
  o.out_dir = tmp.path;
  auto r = t.run(o);
  CHECK(r.steps == 8);
  CHECK(slurp(tmp.path / "metrics.jsonl").find("\"object\"") == std::string::npos);

  t.loss.object_loss = ObjectLoss::ctr_img;
  CHECK_THROWS_AS(t.run(), ConfigError);
  t.loss.object_loss = ObjectLoss::none;
  t.loss.use_global = false;
  CHECK_THROWS_AS(t.run(), ConfigError);
}

TEST_CASE("non-finite state aborts with the step and the last good checkpoint") {
  Tiny t(16);
  t.train.epochs = 2;
  TempDir tmp("nan");
  TrainOptions o;
  o.out_dir = tmp.path;
  o.stop_after_steps = 1;  // one clean step, checkpointed
  t.run(o);
  REQUIRE(std::filesystem::exists(tmp.path / "ckpt_last.bin"));

  for (auto& s : t.data.samples) std::fill(s.image.data.begin(), s.image.data.end(), std::nanf(""));
  o.stop_after_steps = -1;
  o.resume_from = tmp.path / "ckpt_last.bin";
  try {
    t.run(o);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    INFO(msg);
    CHECK(msg.find("step 1") != std::string::npos);
    CHECK(msg.find("ckpt_last.bin") != std::string::npos);
  }
  const std::string log = slurp(tmp.path / "metrics.jsonl");
  CHECK(log.find("\"kind\":\"failure\"") != std::string::npos);
}

TEST_CASE("training loss decreases on a 200-image subset for every combination") {
  struct Combo {
    AttentionKind att;
    ObjectLoss loss;
    bool global_only;
  };
  const std::vector<Combo> combos{
      {AttentionKind::slot, ObjectLoss::ctr_all, false},  {AttentionKind::slot, ObjectLoss::ctr_img, false},
      {AttentionKind::slot, ObjectLoss::cos_sim, false},  {AttentionKind::cross, ObjectLoss::ctr_all, false},
      {AttentionKind::cross, ObjectLoss::ctr_img, false}, {AttentionKind::cross, ObjectLoss::cos_sim, false},
      {AttentionKind::slot, ObjectLoss::none, true}};
  GeneratorSpec g;  // desk-scale images and model widths, 8-pixel patches for speed
  const Dataset data = generate_dataset(g, 200, 5, {{"train", 1.0}});
  for (const auto& cb : combos) {
    ModelConfig model;
    model.backbone.patch_size = 8;
    model.grouping.attention = cb.att;
    model.global_only = cb.global_only;
    model.backbone.use_cls_token = cb.global_only;
    LossConfig loss;
    loss.object_loss = cb.loss;
    AugmentConfig aug;
    TrainConfig tc;
    tc.batch_size = 16;  // 12 steps per epoch
    tc.epochs = 2;
    tc.warmup_epochs = 1;
    tc.seed = 4;
    std::vector<const SceneSample*> train_set;
    for (const auto& s : data.samples) train_set.push_back(&s);
    TrainOptions at10;
    at10.stop_after_steps = 10;
    auto early = osr::train(train_set, {}, model, loss, aug, tc, at10);
    auto full = osr::train(train_set, {}, model, loss, aug, tc, {});
    REQUIRE(full.steps == 24);
    const Model<float> m10(model, early.params), mend(model, full.params);
    const double l10 = evaluate_loss(m10, train_set, loss, aug, 16, 77);
    const double lend = evaluate_loss(mend, train_set, loss, aug, 16, 77);
    CHECK_MESSAGE(lend < l10, to_string(cb.att) << "/" << to_string(cb.loss) << ": " << l10 << " -> " << lend);
  }
}

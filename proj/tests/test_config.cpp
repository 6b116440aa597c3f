#include <doctest.h>

#include <fstream>

#include "osr/config.hpp"
#include "temp_dir.hpp"

using namespace osr;
using nlohmann::json;

TEST_CASE("config json round trip") {
  ExperimentConfig c = preset("cross_ctrall_objonly");
  c.seeds = {3, 1};
  c.model.backbone.patch_size = 8;
  c.model.grouping.weight_init = "trunc_normal";
  const json j = c.to_json();
  const ExperimentConfig back = ExperimentConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.model.grouping.attention == AttentionKind::cross);
  CHECK(back.losses.object_loss == ObjectLoss::ctr_all);
  CHECK_FALSE(back.losses.use_global);
  CHECK(back.seeds == std::vector<std::uint64_t>{3, 1});
}

TEST_CASE("unknown keys and wrong types are rejected") {
  json j = ExperimentConfig{}.to_json();
  j["trainer"]["epoch"] = 3;
  try {
    ExperimentConfig::from_json(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("trainer.epoch") != std::string::npos);
  }
  j = ExperimentConfig{}.to_json();
  j["trainer"]["epochs"] = "ten";
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
  j = ExperimentConfig{}.to_json();
  j["trainer"]["epochs"] = 2.5;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
  j = ExperimentConfig{}.to_json();
  j["grouping"]["attention"] = "sparse";
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
  j = ExperimentConfig{}.to_json();
  j["grouping"]["weight_init"] = "he";
  CHECK_THROWS_AS(ExperimentConfig::from_json(j).validate(), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json::array()), ConfigError);
  j = ExperimentConfig{}.to_json();
  j["schema_version"] = 99;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
}

TEST_CASE("missing keys keep their defaults") {
  const ExperimentConfig c = ExperimentConfig::from_json(json{{"trainer", {{"epochs", 4}}}});
  CHECK(c.trainer.epochs == 4);
  CHECK(c.trainer.batch_size == ExperimentConfig{}.trainer.batch_size);
  CHECK(c.data.train == 5000);
}

TEST_CASE("unknown_keys lists dotted paths") {
  const json schema{{"a", 1}, {"b", {{"c", 2}}}};
  const json j{{"a", 1}, {"x", 0}, {"b", {{"c", 1}, {"d", 1}}}};
  auto u = unknown_keys(j, schema);
  std::sort(u.begin(), u.end());
  CHECK(u == std::vector<std::string>{"b.d", "x"});
  CHECK(unknown_keys(schema, schema).empty());
}

TEST_CASE("overrides") {
  ExperimentConfig c = with_overrides(preset("default"), {"backbone.patch_size=8", "losses.object_loss=cossim",
                                                          "trainer.lr_peak=0.001", "seeds=[0,1,2]"});
  CHECK(c.model.backbone.patch_size == 8);
  CHECK(c.losses.object_loss == ObjectLoss::cos_sim);
  CHECK(c.trainer.lr_peak == 0.001);
  CHECK(c.seeds.size() == 3);
  CHECK_THROWS_AS(with_overrides(c, {"backbone.patchsize=8"}), ConfigError);
  CHECK_THROWS_AS(with_overrides(c, {"backbone.patch_size=eight"}), ConfigError);
  CHECK_THROWS_AS(with_overrides(c, {"patch_size"}), ConfigError);
  CHECK_THROWS_AS(with_overrides(c, {"backbone..patch_size=8"}), ConfigError);
  CHECK_THROWS_AS(with_overrides(c, {"backbone=3"}), ConfigError);
}

TEST_CASE("presets") {
  const auto names = preset_names();
  CHECK(names.size() == 15);
  for (const auto& n : names) {
    CAPTURE(n);
    const ExperimentConfig c = preset(n);
    CHECK_NOTHROW(c.validate());
    CHECK(c.id == n);
  }
  CHECK(preset("global_only").model.global_only);
  CHECK(preset("global_only").losses.object_loss == ObjectLoss::none);
  CHECK(preset("slot_cossim").losses.object_loss == ObjectLoss::cos_sim);
  CHECK(preset("slot_ctrimg_objonly").losses.use_global == false);
  CHECK(preset("smoke").data.total() == 200);
  CHECK_THROWS_AS(preset("slot_sparse"), ConfigError);
  CHECK_THROWS_AS(load_config("no_such_preset_or_file"), ConfigError);
}

TEST_CASE("config files may start from a preset") {
  TempDir tmp("cfg");
  const auto path = tmp.path / "c.json";
  std::ofstream(path) << R"({"preset": "cross_ctrimg", "trainer": {"epochs": 3}, "id": "mine"})";
  const ExperimentConfig c = load_config(path.string());
  CHECK(c.model.grouping.attention == AttentionKind::cross);
  CHECK(c.trainer.epochs == 3);
  CHECK(c.id == "mine");
  std::ofstream(path) << R"({"preset": 7})";
  CHECK_THROWS_AS(load_config(path.string()), ConfigError);
  std::ofstream(path) << "{not json";
  CHECK_THROWS_AS(load_config(path.string()), ConfigError);
}

TEST_CASE("validation catches inconsistent settings") {
  ExperimentConfig c;
  c.model.backbone.patch_size = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.model.global_only = true;  // without a CLS token
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.data.generator.max_objects = c.model.grouping.queries.num_queries;  // no room for the background slot
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("FNV-1a and config hashes") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
  const json a = ExperimentConfig{}.to_json();
  CHECK(config_hash(a).size() == 16);
  CHECK(config_hash(a) == config_hash(ExperimentConfig::from_json(a).to_json()));
  // key order in the source text does not matter
  CHECK(config_hash(json::parse(R"({"b":1,"a":2})")) == config_hash(json::parse(R"({"a":2,"b":1})")));
  json b = a;
  b["trainer"]["seed"] = 1;
  CHECK(config_hash(a) != config_hash(b));
}

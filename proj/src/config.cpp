#include "osr/config.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace osr {

using nlohmann::json;

json ExperimentConfig::to_json() const {
  const auto& g = data.generator;
  const auto& a = augment;
  const auto& bb = model.backbone;
  const auto& gr = model.grouping;
  const auto& t = trainer;
  const auto& p = eval.probe;
  return json{
      {"schema_version", kConfigSchemaVersion},
      {"id", id},
      {"seeds", seeds},
      {"fixed_op", fixed_op},
      {"data",
       {{"image_size", g.image_size},
        {"min_objects", g.min_objects},
        {"max_objects", g.max_objects},
        {"small_radius", g.small_radius},
        {"large_radius", g.large_radius},
        {"max_overlap", g.max_overlap},
        {"max_retries", g.max_retries},
        {"train", data.train},
        {"val", data.val},
        {"probe_train", data.probe_train},
        {"test", data.test},
        {"seed", data.seed}}},
      {"augment",
       {{"crop_min", a.crop_scale_min},
        {"crop_max", a.crop_scale_max},
        {"aspect_min", a.aspect_min},
        {"aspect_max", a.aspect_max},
        {"flip_prob", a.flip_prob},
        {"brightness", a.brightness},
        {"saturation", a.saturation},
        {"hue", a.hue},
        {"mean", a.mean},
        {"std", a.std}}},
      {"backbone",
       {{"image_size", bb.image_size},
        {"patch_size", bb.patch_size},
        {"embed_dim", bb.embed_dim},
        {"num_layers", bb.num_layers},
        {"num_heads", bb.num_heads},
        {"mlp_hidden", bb.mlp_hidden},
        {"use_cls_token", bb.use_cls_token},
        {"pos_grid", bb.pos_grid}}},
      {"grouping",
       {{"attention", to_string(gr.attention)},
        {"queries", to_string(gr.queries.kind)},
        {"num_queries", gr.queries.num_queries},
        {"mixture_components", gr.queries.mixture_components},
        {"kmeans_iterations", gr.queries.kmeans_iterations},
        {"cross_layers", gr.cross_layers},
        {"cross_heads", gr.cross_heads},
        {"cross_mlp_hidden", gr.cross_mlp_hidden},
        {"slot_iterations", gr.slot_iterations},
        {"slot_epsilon", gr.slot_epsilon},
        {"weight_init", gr.weight_init}}},
      {"heads",
       {{"proj_dim", model.heads.proj_dim},
        {"global_dim", model.heads.global_dim},
        {"global_only", model.global_only}}},
      {"losses",
       {{"temperature", losses.temperature},
        {"object_loss", to_string(losses.object_loss)},
        {"use_global", losses.use_global},
        {"object_weight", losses.object_weight},
        {"global_weight", losses.global_weight}}},
      {"trainer",
       {{"batch_size", t.batch_size},
        {"epochs", t.epochs},
        {"warmup_epochs", t.warmup_epochs},
        {"lr_peak", t.lr_peak},
        {"lr_final", t.lr_final},
        {"weight_decay", t.weight_decay},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"clip_norm", t.clip_norm},
        {"checkpoint_every", t.checkpoint_every}}},
      {"eval",
       {{"run_probe", eval.run_probe},
        {"overlays", eval.overlays},
        {"probe_lr", p.lr},
        {"probe_weight_decay", p.weight_decay},
        {"probe_steps", p.steps},
        {"probe_batch_size", p.batch_size},
        {"probe_max_pos_weight", p.max_pos_weight}}},
  };
}

std::vector<std::string> unknown_keys(const json& j, const json& schema, const std::string& prefix) {
  std::vector<std::string> out;
  if (!j.is_object()) return out;
  for (const auto& [key, value] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!schema.is_object() || !schema.contains(key)) {
      out.push_back(path);
    } else if (value.is_object()) {
      auto nested = unknown_keys(value, schema.at(key), path);
      out.insert(out.end(), nested.begin(), nested.end());
    }
  }
  return out;
}

namespace {

bool same_kind(const json& value, const json& reference) {
  if (reference.is_boolean()) return value.is_boolean();
  if (reference.is_number_integer() || reference.is_number_unsigned()) {
    return value.is_number_integer() || value.is_number_unsigned();
  }
  if (reference.is_number_float()) return value.is_number();
  if (reference.is_string()) return value.is_string();
  if (reference.is_array()) return value.is_array();
  if (reference.is_object()) return value.is_object();
  return true;
}

// Copies `in` onto `base` (which holds defaults), collecting type mismatches.
void merge_checked(json& base, const json& in, const std::string& prefix, std::vector<std::string>& bad) {
  for (const auto& [key, value] : in.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    json& slot = base[key];
    if (!same_kind(value, slot)) {
      bad.push_back(path + " (expected " + std::string(slot.type_name()) + ", got " + value.type_name() + ")");
      continue;
    }
    if (value.is_object()) {
      merge_checked(slot, value, path, bad);
    } else {
      slot = value;
    }
  }
}

std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) s += (i ? ", " : "") + items[i];
  return s;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& in) {
  if (!in.is_object()) throw ConfigError("config: top level must be an object");
  const ExperimentConfig defaults;
  json merged = defaults.to_json();
  json body = in;
  body.erase("preset");
  const auto unknown = unknown_keys(body, merged);
  if (!unknown.empty()) throw ConfigError("config: unknown keys: " + join(unknown));
  std::vector<std::string> bad;
  merge_checked(merged, body, "", bad);
  if (!bad.empty()) throw ConfigError("config: wrong value types: " + join(bad));
  if (merged.at("schema_version").get<int>() != kConfigSchemaVersion) {
    throw ConfigError("config: unsupported schema_version " + merged.at("schema_version").dump());
  }

  ExperimentConfig c;
  try {
    c.id = merged.at("id").get<std::string>();
    c.seeds = merged.at("seeds").get<std::vector<std::uint64_t>>();
    c.fixed_op = merged.at("fixed_op").get<bool>();

    const auto& d = merged.at("data");
    auto& g = c.data.generator;
    g.image_size = d.at("image_size").get<int>();
    g.min_objects = d.at("min_objects").get<int>();
    g.max_objects = d.at("max_objects").get<int>();
    g.small_radius = d.at("small_radius").get<int>();
    g.large_radius = d.at("large_radius").get<int>();
    g.max_overlap = d.at("max_overlap").get<double>();
    g.max_retries = d.at("max_retries").get<int>();
    c.data.train = d.at("train").get<int>();
    c.data.val = d.at("val").get<int>();
    c.data.probe_train = d.at("probe_train").get<int>();
    c.data.test = d.at("test").get<int>();
    c.data.seed = d.at("seed").get<std::uint64_t>();

    const auto& a = merged.at("augment");
    c.augment.crop_scale_min = a.at("crop_min").get<double>();
    c.augment.crop_scale_max = a.at("crop_max").get<double>();
    c.augment.aspect_min = a.at("aspect_min").get<double>();
    c.augment.aspect_max = a.at("aspect_max").get<double>();
    c.augment.flip_prob = a.at("flip_prob").get<double>();
    c.augment.brightness = a.at("brightness").get<double>();
    c.augment.saturation = a.at("saturation").get<double>();
    c.augment.hue = a.at("hue").get<double>();
    c.augment.mean = a.at("mean").get<std::array<float, 3>>();
    c.augment.std = a.at("std").get<std::array<float, 3>>();

    const auto& b = merged.at("backbone");
    auto& bb = c.model.backbone;
    bb.image_size = b.at("image_size").get<int>();
    bb.patch_size = b.at("patch_size").get<int>();
    bb.embed_dim = b.at("embed_dim").get<int>();
    bb.num_layers = b.at("num_layers").get<int>();
    bb.num_heads = b.at("num_heads").get<int>();
    bb.mlp_hidden = b.at("mlp_hidden").get<int>();
    bb.use_cls_token = b.at("use_cls_token").get<bool>();
    bb.pos_grid = b.at("pos_grid").get<int>();
    c.augment.output_size = bb.image_size;

    const auto& gj = merged.at("grouping");
    auto& gr = c.model.grouping;
    gr.attention = parse_attention_kind(gj.at("attention").get<std::string>());
    gr.queries.kind = parse_query_kind(gj.at("queries").get<std::string>());
    gr.queries.num_queries = gj.at("num_queries").get<int>();
    gr.queries.mixture_components = gj.at("mixture_components").get<int>();
    gr.queries.kmeans_iterations = gj.at("kmeans_iterations").get<int>();
    gr.cross_layers = gj.at("cross_layers").get<int>();
    gr.cross_heads = gj.at("cross_heads").get<int>();
    gr.cross_mlp_hidden = gj.at("cross_mlp_hidden").get<int>();
    gr.slot_iterations = gj.at("slot_iterations").get<int>();
    gr.slot_epsilon = gj.at("slot_epsilon").get<double>();
    gr.weight_init = gj.at("weight_init").get<std::string>();

    const auto& h = merged.at("heads");
    c.model.heads.proj_dim = h.at("proj_dim").get<int>();
    c.model.heads.global_dim = h.at("global_dim").get<int>();
    c.model.global_only = h.at("global_only").get<bool>();

    const auto& l = merged.at("losses");
    c.losses.temperature = l.at("temperature").get<double>();
    c.losses.object_loss = parse_object_loss(l.at("object_loss").get<std::string>());
    c.losses.use_global = l.at("use_global").get<bool>();
    c.losses.object_weight = l.at("object_weight").get<double>();
    c.losses.global_weight = l.at("global_weight").get<double>();

    const auto& t = merged.at("trainer");
    c.trainer.batch_size = t.at("batch_size").get<int>();
    c.trainer.epochs = t.at("epochs").get<int>();
    c.trainer.warmup_epochs = t.at("warmup_epochs").get<int>();
    c.trainer.lr_peak = t.at("lr_peak").get<double>();
    c.trainer.lr_final = t.at("lr_final").get<double>();
    c.trainer.weight_decay = t.at("weight_decay").get<double>();
    c.trainer.beta1 = t.at("beta1").get<double>();
    c.trainer.beta2 = t.at("beta2").get<double>();
    c.trainer.adam_eps = t.at("adam_eps").get<double>();
    c.trainer.clip_norm = t.at("clip_norm").get<double>();
    c.trainer.checkpoint_every = t.at("checkpoint_every").get<int>();

    const auto& e = merged.at("eval");
    c.eval.run_probe = e.at("run_probe").get<bool>();
    c.eval.overlays = e.at("overlays").get<int>();
    c.eval.probe.lr = e.at("probe_lr").get<double>();
    c.eval.probe.weight_decay = e.at("probe_weight_decay").get<double>();
    c.eval.probe.steps = e.at("probe_steps").get<int>();
    c.eval.probe.batch_size = e.at("probe_batch_size").get<int>();
    c.eval.probe.max_pos_weight = e.at("probe_max_pos_weight").get<double>();
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  if (id.empty()) throw ConfigError("config: id must not be empty");
  for (char ch : id) {
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-')) {
      throw ConfigError("config: id may only contain letters, digits, '_' and '-'");
    }
  }
  if (seeds.empty()) throw ConfigError("config: seeds must not be empty");
  const auto& g = data.generator;
  if (g.image_size < 8) throw ConfigError("data: image_size must be >= 8");
  if (g.min_objects < 1 || g.max_objects < g.min_objects || g.max_objects > 255) {
    throw ConfigError("data: need 1 <= min_objects <= max_objects <= 255");
  }
  if (g.small_radius < 1 || g.large_radius < g.small_radius) {
    throw ConfigError("data: need 1 <= small_radius <= large_radius");
  }
  if (!(g.max_overlap >= 0.0 && g.max_overlap <= 1.0)) throw ConfigError("data: max_overlap must be in [0, 1]");
  if (g.max_retries < 1) throw ConfigError("data: max_retries must be >= 1");
  if (data.train < 1 || data.val < 0 || data.probe_train < 0 || data.test < 1) {
    throw ConfigError("data: need train >= 1, test >= 1 and non-negative val/probe_train");
  }
  augment.validate();
  model.validate();
  if (!model.global_only && g.max_objects > model.grouping.queries.num_queries - 1) {
    throw ConfigError("config: max_objects must be <= num_queries - 1 (one slot is left for the background)");
  }
  losses.validate();
  trainer.validate();
  eval.probe.validate();
  if (eval.overlays < 0) throw ConfigError("eval: overlays must be >= 0");
  if (model.global_only && losses.object_enabled()) {
    throw ConfigError("losses: global-only model requires object_loss=none");
  }
  if (model.global_only && !losses.use_global) throw ConfigError("losses: global-only model needs use_global=true");
  if (!model.global_only && losses.object_loss == ObjectLoss::cos_sim &&
      model.heads.proj_dim != model.backbone.embed_dim) {
    throw ConfigError("heads: cossim compares projections with raw slots, so proj_dim must equal embed_dim");
  }
}

std::string ExperimentConfig::group_label() const {
  if (model.global_only) return "global-only";
  std::string s = to_string(model.grouping.attention) + "/" + to_string(losses.object_loss);
  if (!losses.use_global) s += " (objects only)";
  return s;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names{"default", "smoke", "global_only"};
  for (const char* att : {"slot", "cross"}) {
    for (const char* loss : {"ctrall", "ctrimg", "cossim"}) {
      names.push_back(std::string(att) + "_" + loss);
      names.push_back(std::string(att) + "_" + loss + "_objonly");
    }
  }
  return names;
}

bool is_preset(const std::string& name) {
  for (const auto& n : preset_names()) {
    if (n == name) return true;
  }
  return false;
}

ExperimentConfig preset(const std::string& name) {
  if (!is_preset(name)) throw ConfigError("unknown preset '" + name + "'");
  ExperimentConfig c;
  c.id = name;
  if (name == "default") return c;
  if (name == "smoke") {
    // 200 images end to end in well under a minute.
    c.data.train = 120;
    c.data.val = 20;
    c.data.probe_train = 40;
    c.data.test = 20;
    c.trainer.batch_size = 16;
    c.trainer.epochs = 2;
    c.trainer.warmup_epochs = 1;
    c.eval.probe.steps = 300;
    c.eval.overlays = 2;
    return c;
  }
  if (name == "global_only") {
    c.model.global_only = true;
    c.model.backbone.use_cls_token = true;
    c.losses.object_loss = ObjectLoss::none;
    return c;
  }
  std::string rest = name;
  bool objonly = false;
  const std::string suffix = "_objonly";
  if (rest.size() > suffix.size() && rest.compare(rest.size() - suffix.size(), suffix.size(), suffix) == 0) {
    objonly = true;
    rest.resize(rest.size() - suffix.size());
  }
  const auto us = rest.find('_');
  c.model.grouping.attention = parse_attention_kind(rest.substr(0, us));
  c.losses.object_loss = parse_object_loss(rest.substr(us + 1));
  c.losses.use_global = !objonly;
  return c;
}

ExperimentConfig load_config(const std::string& name_or_path) {
  if (is_preset(name_or_path)) return preset(name_or_path);
  const std::filesystem::path path(name_or_path);
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("config '" + name_or_path + "' is neither a preset nor a readable file (presets: " +
                      join(preset_names()) + ")");
  }
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": invalid JSON: " + e.what());
  }
  if (j.is_object() && j.contains("preset")) {
    if (!j.at("preset").is_string()) throw ConfigError("config: preset must be a string");
    json base = preset(j.at("preset").get<std::string>()).to_json();
    json body = j;
    body.erase("preset");
    const auto unknown = unknown_keys(body, base);
    if (!unknown.empty()) throw ConfigError("config: unknown keys: " + join(unknown));
    base.merge_patch(body);
    return ExperimentConfig::from_json(base);
  }
  return ExperimentConfig::from_json(j);
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' must look like section.key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    if (!node->is_object() || !node->contains(key)) throw ConfigError("override: unknown key '" + path + "'");
    if (dot == std::string::npos) {
      if (!same_kind(value, node->at(key))) {
        throw ConfigError("override: '" + path + "' expects " + node->at(key).type_name());
      }
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

ExperimentConfig with_overrides(const ExperimentConfig& base, const std::vector<std::string>& sets) {
  json j = base.to_json();
  for (const auto& s : sets) apply_override(j, s);
  return ExperimentConfig::from_json(j);
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const json& j) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

}  // namespace osr

#include "osr/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "osr/evalsuite.hpp"
#include "osr/image_io.hpp"
#include "osr/probe.hpp"
#include "osr/trainer.hpp"

namespace osr {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path default_run_root() {
  const char* env = std::getenv(kRunRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::vector<SplitSpec> dataset_splits(const DataConfig& cfg) {
  const double n = cfg.total();
  std::vector<SplitSpec> out;
  out.push_back({"train", cfg.train / n});
  if (cfg.val > 0) out.push_back({"val", cfg.val / n});
  if (cfg.probe_train > 0) out.push_back({"probe_train", cfg.probe_train / n});
  out.push_back({"test", cfg.test / n});
  return out;
}

json data_json(const ExperimentConfig& cfg) { return cfg.to_json().at("data"); }

fs::path dataset_dir(const fs::path& run_root, const DataConfig& cfg) {
  ExperimentConfig c;
  c.data = cfg;
  return run_root / "data" / ("scenes-" + config_hash(data_json(c)).substr(0, 12));
}

const Dataset& ensure_dataset(const fs::path& dir, const DataConfig& cfg) {
  static std::map<std::string, Dataset> cache;
  const std::string key = fs::absolute(dir).lexically_normal().string();
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  if (!fs::exists(dir / "manifest")) {
    Dataset d = generate_dataset(cfg.generator, static_cast<std::size_t>(cfg.total()), cfg.seed,
                                 dataset_splits(cfg));
    // Write to a sibling directory first so an interrupted write never looks complete.
    fs::path tmp = dir;
    tmp += ".partial";
    fs::remove_all(tmp);
    save_dataset(tmp, d);
    fs::create_directories(dir.parent_path());
    fs::rename(tmp, dir);
  }
  Dataset loaded = load_dataset(dir);
  if (loaded.samples.size() != static_cast<std::size_t>(cfg.total())) {
    throw DataError("dataset " + dir.string() + " holds " + std::to_string(loaded.samples.size()) +
                    " samples, config expects " + std::to_string(cfg.total()));
  }
  return cache.emplace(key, std::move(loaded)).first->second;
}

namespace {

// Source image with each slot's attention (upsampled, scaled to its max) as a red tint.
Image overlay_strip(const Image& source, const MatF& attention, int grid) {
  const int H = source.height, W = source.width;
  const int K = static_cast<int>(attention.rows());
  Image out(H, W * (K + 1));
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = source.at(y, x, c);
    }
  }
  for (int k = 0; k < K; ++k) {
    Plane g(grid, grid);
    for (int i = 0; i < grid * grid; ++i) g.data[i] = attention(k, i);
    Plane up = resize_bilinear(g, H, W);
    const float peak = std::max(1e-12f, *std::max_element(up.data.begin(), up.data.end()));
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const float a = up.at(y, x) / peak;
        const float gray = (source.at(y, x, 0) + source.at(y, x, 1) + source.at(y, x, 2)) / 3.0f;
        const int ox = (k + 1) * W + x;
        out.at(y, ox, 0) = 0.35f * gray + 0.65f * a;
        out.at(y, ox, 1) = 0.35f * gray;
        out.at(y, ox, 2) = 0.35f * gray;
      }
    }
  }
  return out;
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

EvalResult evaluate_model(const Model<float>& model, const ExperimentConfig& cfg, const Dataset& data,
                          std::uint64_t seed, const fs::path& overlay_dir) {
  EvalResult res;
  const bool objects = !cfg.model.global_only;
  const int grid = cfg.model.backbone.grid_side();
  auto encode = [&](const SceneSample& s, MatF* slots, MatF* repr, MatF* attention) {
    ModelCache<float> cache;
    const Image input = prepare_eval_image(s.image, cfg.augment);
    auto out = model.forward(input, derive_seed(seed, 0xE7A1, static_cast<std::uint64_t>(s.id)), cache);
    if (slots) *slots = out.slots.slots;
    if (repr) *repr = out.global.repr;
    if (attention) *attention = out.slots.attention;
  };

  const auto test = data.split("test");
  const auto probe_train = data.split("probe_train");
  res.images = static_cast<int>(test.size());
  std::vector<MatF> test_slots, test_repr;
  std::vector<std::optional<double>> per_image;
  if (!overlay_dir.empty() && objects && cfg.eval.overlays > 0) fs::create_directories(overlay_dir);
  for (std::size_t i = 0; i < test.size(); ++i) {
    MatF slots, repr, attention;
    encode(*test[i], objects ? &slots : nullptr, &repr, objects ? &attention : nullptr);
    test_repr.push_back(repr);
    if (!objects) continue;
    test_slots.push_back(slots);
    const MaskSet masks = extract_masks(attention, grid, grid, test[i]->labels.height, test[i]->labels.width);
    res.constant_maps += masks.constant_maps;
    per_image.push_back(image_iou(object_masks(*test[i]), masks.masks));
    if (!overlay_dir.empty() && static_cast<int>(i) < cfg.eval.overlays) {
      write_ppm(overlay_dir / ("test_" + std::to_string(test[i]->id) + ".ppm"),
                overlay_strip(test[i]->image, attention, grid));
    }
  }
  if (objects) res.iou = mean_iou(per_image);

  if (cfg.eval.run_probe && !probe_train.empty()) {
    std::vector<MatF> train_slots, train_repr;
    for (const auto* s : probe_train) {
      MatF slots, repr;
      encode(*s, objects ? &slots : nullptr, &repr, nullptr);
      train_repr.push_back(repr);
      if (objects) train_slots.push_back(slots);
    }
    const MatD train_labels = label_matrix(probe_train);
    const MatD test_labels = label_matrix(test).transpose();  // 96 x M
    ProbeConfig pc = cfg.eval.probe;
    pc.seed = seed;
    auto global = train_probe(train_repr, train_labels, pc);
    res.degenerate_questions = global.degenerate_questions;
    res.ap_global = average_precision(global.probe.predict(test_repr), test_labels);
    if (objects) {
      auto obj = train_probe(train_slots, train_labels, pc);
      res.ap_object = average_precision(obj.probe.predict(test_slots), test_labels);
    }
  }
  return res;
}

ExperimentConfig single_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  ExperimentConfig c = cfg;
  c.seeds = {seed};
  c.trainer.seed = seed;
  return c;
}

std::string run_name(const ExperimentConfig& single) {
  return single.id + "-" + config_hash(single.to_json()).substr(0, 12);
}

namespace {

json to_json_opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json result_json(const ExperimentConfig& cfg, const EvalResult& ev, const TrainResult& tr, double train_s,
                 double eval_s) {
  json r;
  r["schema_version"] = kResultSchemaVersion;
  r["status"] = "completed";
  r["id"] = cfg.id;
  r["group"] = cfg.group_label();
  r["attention"] = cfg.model.global_only ? "none" : to_string(cfg.model.grouping.attention);
  r["object_loss"] = to_string(cfg.losses.object_loss);
  r["use_global"] = cfg.losses.use_global;
  r["global_only"] = cfg.model.global_only;
  r["crop_min"] = cfg.augment.crop_scale_min;
  r["crop_max"] = cfg.augment.crop_scale_max;
  r["seed"] = cfg.seeds.at(0);
  r["config_hash"] = config_hash(cfg.to_json());
  r["iou"] = to_json_opt(ev.iou);
  r["ap"] = to_json_opt(ev.ap());
  r["ap_object"] = to_json_opt(ev.ap_object);
  r["ap_global"] = to_json_opt(ev.ap_global);
  r["constant_maps"] = ev.constant_maps;
  r["degenerate_questions"] = ev.degenerate_questions;
  r["test_images"] = ev.images;
  r["train_steps"] = tr.steps;
  r["final_train_loss"] = tr.log.empty() ? json(nullptr) : json(tr.log.back().loss);
  r["best_val_loss"] = std::isfinite(tr.best_val) ? json(tr.best_val) : json(nullptr);
  int zero_norm = 0;
  for (const auto& s : tr.log) zero_norm += s.zero_norm_slots;
  r["zero_norm_slots"] = zero_norm;
  if (!cfg.fixed_op) r["seconds"] = {{"train", train_s}, {"eval", eval_s}};
  return r;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("corrupt " + path.string() + ": " + e.what());
  }
}

// Renames `dir` to the first free "<dir>.<tag>-N".
void move_aside(const fs::path& dir, const std::string& tag) {
  for (int n = 1;; ++n) {
    fs::path target = dir;
    target += "." + tag + "-" + std::to_string(n);
    if (!fs::exists(target)) {
      fs::rename(dir, target);
      return;
    }
  }
}

}  // namespace

RunOutcome run_single(const ExperimentConfig& cfg_in, std::uint64_t seed, const fs::path& run_root,
                      ExistingRun existing, const std::function<void(const std::string&)>& log) {
  const ExperimentConfig cfg = single_seed(cfg_in, seed);
  cfg.validate();
  RunOutcome outcome;
  outcome.dir = run_root / run_name(cfg);
  auto say = [&](const std::string& msg) {
    if (log) log(msg);
  };

  if (fs::exists(outcome.dir / "result.json")) {
    switch (existing) {
      case ExistingRun::error:
        throw ConfigError("run " + outcome.dir.string() + " already completed; pass --force to re-run");
      case ExistingRun::reuse:
        outcome.result = read_json(outcome.dir / "result.json");
        outcome.reused = true;
        say("reusing " + outcome.dir.string());
        return outcome;
      case ExistingRun::replace:
        move_aside(outcome.dir, "superseded");
        break;
    }
  } else if (fs::exists(outcome.dir)) {
    move_aside(outcome.dir, "incomplete");
  }
  fs::create_directories(outcome.dir);
  json cfg_json = cfg.to_json();
  write_json(outcome.dir / "config.json", cfg_json);

  try {
    const fs::path data_path = dataset_dir(run_root, cfg.data);
    say("data: " + data_path.string());
    const Dataset& data = ensure_dataset(data_path, cfg.data);

    TrainOptions opts;
    opts.out_dir = outcome.dir;
    opts.log_wall_time = !cfg.fixed_op;
    opts.run_meta = {{"config", cfg_json}};
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult tr = train(data.split("train"), data.split("val"), cfg.model, cfg.losses, cfg.augment,
                           cfg.trainer, opts);
    const double train_s = elapsed(t0);
    say("trained " + std::to_string(tr.steps) + " steps in " + std::to_string(train_s) + " s");

    const auto t1 = std::chrono::steady_clock::now();
    Model<float> model(cfg.model, std::move(tr.params));
    const EvalResult ev = evaluate_model(model, cfg, data, seed, outcome.dir / "overlays");
    outcome.result = result_json(cfg, ev, tr, train_s, elapsed(t1));
    write_json(outcome.dir / "result.json", outcome.result);
  } catch (const std::exception& e) {
    json failure{{"status", "failed"}, {"error", e.what()}};
    if (dynamic_cast<const ConfigError*>(&e)) {
      failure["kind"] = "config";
    } else if (dynamic_cast<const NumericError*>(&e)) {
      failure["kind"] = "numeric";
    } else {
      failure["kind"] = "runtime";
    }
    write_json(outcome.dir / "failure.json", failure);
    throw;
  }
  return outcome;
}

json eval_only(const fs::path& run_dir, bool force) {
  const json cfg_json = read_json(run_dir / "config.json");
  const ExperimentConfig cfg = ExperimentConfig::from_json(cfg_json);
  const fs::path out_path = run_dir / "eval_only.json";
  if (fs::exists(out_path) && !force) {
    throw ConfigError(out_path.string() + " exists; pass --force to overwrite");
  }
  const fs::path run_root = run_dir.parent_path().empty() ? fs::path(".") : run_dir.parent_path();
  const Dataset& data = ensure_dataset(dataset_dir(run_root, cfg.data), cfg.data);
  Model<float> model(cfg.model, read_checkpoint_params(run_dir / "ckpt_last.bin"));
  const EvalResult ev = evaluate_model(model, cfg, data, cfg.seeds.at(0));
  json r{{"schema_version", kResultSchemaVersion},
         {"config_hash", config_hash(cfg_json)},
         {"iou", to_json_opt(ev.iou)},
         {"ap", to_json_opt(ev.ap())},
         {"ap_object", to_json_opt(ev.ap_object)},
         {"ap_global", to_json_opt(ev.ap_global)},
         {"constant_maps", ev.constant_maps}};
  write_json(out_path, r);
  return r;
}

std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base, const GridSpec& grid) {
  auto strings_or = [](const std::vector<std::string>& v, const std::string& fallback) {
    return v.empty() ? std::vector<std::string>{fallback} : v;
  };
  const auto attentions =
      strings_or(grid.attention, base.model.global_only ? "global" : to_string(base.model.grouping.attention));
  const auto losses = strings_or(grid.loss, to_string(base.losses.object_loss));
  const auto globals = grid.use_global.empty() ? std::vector<bool>{base.losses.use_global} : grid.use_global;
  auto crops = grid.crops;
  if (crops.empty()) crops.push_back({base.augment.crop_scale_min, base.augment.crop_scale_max});
  const auto seeds = grid.seeds.empty() ? base.seeds : grid.seeds;

  std::vector<ExperimentConfig> out;
  std::vector<std::string> seen;
  for (const auto& att : attentions) {
    for (const auto& loss : losses) {
      for (bool g : globals) {
        for (const auto& [cmin, cmax] : crops) {
          ExperimentConfig c = base;
          c.seeds = seeds;
          std::string id;
          if (att == "global") {
            c.model.global_only = true;
            c.model.backbone.use_cls_token = true;
            c.losses.object_loss = ObjectLoss::none;
            c.losses.use_global = true;
            id = "global_only";
          } else {
            c.model.global_only = false;
            c.model.grouping.attention = parse_attention_kind(att);
            c.losses.object_loss = parse_object_loss(loss);
            c.losses.use_global = g;
            if (c.losses.object_loss == ObjectLoss::none && !g) continue;
            id = att + "_" + loss + (g ? "" : "_objonly");
          }
          c.augment.crop_scale_min = cmin;
          c.augment.crop_scale_max = cmax;
          if (grid.crops.size() > 1) {
            std::ostringstream os;
            os << "_crop" << cmin << "-" << cmax;
            id += os.str();
          }
          c.id = id;
          if (std::find(seen.begin(), seen.end(), id) != seen.end()) continue;
          seen.push_back(id);
          c.validate();
          out.push_back(std::move(c));
        }
      }
    }
  }
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  auto parse_one = [&](const std::string& s) -> std::uint64_t {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw ConfigError("invalid seed '" + s + "'");
    return v;
  };
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto dots = part.find("..");
    if (dots != std::string::npos) {
      const auto lo = parse_one(part.substr(0, dots));
      const auto hi = parse_one(part.substr(dots + 2));
      if (hi < lo || hi - lo > 10000) throw ConfigError("invalid seed range '" + part + "'");
      for (auto s = lo; s <= hi; ++s) out.push_back(s);
    } else {
      out.push_back(parse_one(part));
    }
  }
  if (out.empty()) throw ConfigError("empty seed list");
  return out;
}

}  // namespace osr

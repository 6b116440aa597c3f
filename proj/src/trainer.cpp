#include "osr/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "osr/checkpoint.hpp"

namespace osr {

using nlohmann::json;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("trainer: batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("trainer: epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw ConfigError("trainer: warmup_epochs must be in [0, epochs)");
  }
  if (!(lr_final > 0.0) || lr_peak < lr_final) throw ConfigError("trainer: need lr_peak >= lr_final > 0");
  if (weight_decay < 0.0) throw ConfigError("trainer: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("trainer: betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("trainer: adam_eps must be > 0");
  if (checkpoint_every < 0) throw ConfigError("trainer: checkpoint_every must be >= 0");
}

double lr_schedule(long step, long steps_per_epoch, const TrainConfig& cfg) {
  const long warmup = static_cast<long>(cfg.warmup_epochs) * steps_per_epoch;
  const long total = static_cast<long>(cfg.epochs) * steps_per_epoch;
  if (step < warmup) return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(warmup);
  double t = static_cast<double>(step - warmup) / static_cast<double>(std::max(1L, total - warmup));
  t = std::clamp(t, 0.0, 1.0);
  return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * (1.0 + std::cos(M_PI * t)) / 2.0;
}

long steps_per_epoch(std::size_t train_size, int batch_size) {
  if (train_size == 0) throw ConfigError("trainer: empty training split");
  return std::max<long>(1, static_cast<long>(train_size) / batch_size);
}

bool decays(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".weight") || ends_with(".w_input") || ends_with(".w_hidden");
}

AdamW::AdamW(const ParameterSet<float>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params.value_at(i);
    m.push_back(MatF::Zero(p.rows(), p.cols()));
    v.push_back(MatF::Zero(p.rows(), p.cols()));
    decay.push_back(decays(params.name(i)));
  }
}

void AdamW::step(ParameterSet<float>& params, double lr, const TrainConfig& cfg) {
  ++t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(cfg.adam_eps);
  const float shrink = static_cast<float>(1.0 - lr * cfg.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.value_at(i);
    const auto& g = params.grad_at(i);
    m[i] = b1 * m[i] + (1.0f - b1) * g;
    v[i] = b2 * v[i] + (1.0f - b2) * g.cwiseProduct(g);
    if (decay[i]) p *= shrink;
    p.array() -= step_size * m[i].array() / (v[i].array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

double clip_grad_norm(ParameterSet<float>& params, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) sq += params.grad_at(i).cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / (norm + 1e-6));
    for (std::size_t i = 0; i < params.size(); ++i) params.grad_at(i) *= scale;
  }
  return norm;
}

BatchForward forward_pairs(const Model<float>& model, const std::vector<AugmentedPair>& pairs,
                           std::uint64_t query_seed) {
  const auto& cfg = model.config();
  const int B = static_cast<int>(pairs.size());
  const int K = cfg.global_only ? 0 : cfg.grouping.queries.num_queries;
  const int D = cfg.backbone.embed_dim;
  BatchForward out;
  out.caches.resize(static_cast<std::size_t>(2 * B));
  auto& proj = out.proj;
  proj.batch = B;
  proj.slots = K;
  proj.p_global.resize(2 * B, cfg.heads.proj_dim);
  proj.p_obj.resize(2 * B * K, cfg.heads.proj_dim);
  proj.s_obj.resize(2 * B * K, D);
  for (int b = 0; b < B; ++b) {
    for (int a = 0; a < 2; ++a) {
      const int v = proj.view_index(a, b);
      // Both views of an image share the query draw so sampled queries are comparable.
      auto res = model.forward(a == 0 ? pairs[b].view0 : pairs[b].view1, derive_seed(query_seed, b),
                               out.caches[v]);
      proj.p_global.row(v) = res.global.proj;
      if (K > 0) {
        proj.p_obj.middleRows(v * K, K) = res.object_proj;
        proj.s_obj.middleRows(v * K, K) = res.slots.slots;
      }
    }
  }
  return out;
}

double evaluate_loss(const Model<float>& model, const std::vector<const SceneSample*>& samples,
                     const LossConfig& loss_cfg, const AugmentConfig& aug_cfg, int batch_size,
                     std::uint64_t seed) {
  if (samples.empty()) return 0.0;
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<AugmentedPair> pairs;
    for (std::size_t i = start; i < end; ++i) pairs.push_back(augment(*samples[i], aug_cfg, derive_seed(seed, i)));
    auto fw = forward_pairs(model, pairs, derive_seed(seed, 0x9E7, start));
    auto res = total_loss(fw.proj, loss_cfg);
    sum += res.total * static_cast<double>(end - start);
    count += end - start;
  }
  return sum / static_cast<double>(count);
}

void write_train_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params,
                            const AdamW& opt, const json& meta) {
  Checkpoint ckpt;
  ckpt.meta = meta;
  ckpt.meta["adam_t"] = opt.t;
  for (std::size_t i = 0; i < params.size(); ++i) {
    ckpt.tensors["param/" + params.name(i)] = params.value_at(i);
    if (i < opt.m.size()) {
      ckpt.tensors["adam.m/" + params.name(i)] = opt.m[i];
      ckpt.tensors["adam.v/" + params.name(i)] = opt.v[i];
    }
  }
  save_checkpoint(path, ckpt);
}

ParameterSet<float> read_checkpoint_params(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  ParameterSet<float> params;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("param/", 0) == 0) params.adopt(name.substr(6), t);
  }
  if (params.size() == 0) throw DataError("checkpoint has no parameters: " + path.string());
  return params;
}

namespace {

json record_json(const StepRecord& r) {
  return json{{"kind", "step"},   {"step", r.step},       {"epoch", r.epoch},
              {"lr", r.lr},       {"loss", r.loss},       {"global", r.global},
              {"object", r.object}, {"grad_norm", r.grad_norm}, {"zero_norm_slots", r.zero_norm_slots}};
}

double wall_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

}  // namespace

TrainResult train(const std::vector<const SceneSample*>& train_set,
                  const std::vector<const SceneSample*>& val_set, const ModelConfig& model_cfg,
                  const LossConfig& loss_cfg, const AugmentConfig& aug_cfg, const TrainConfig& cfg,
                  const TrainOptions& opts) {
  cfg.validate();
  loss_cfg.validate();
  aug_cfg.validate();
  model_cfg.validate();
  if (model_cfg.global_only && loss_cfg.object_enabled()) {
    throw ConfigError("trainer: the global-only model has no object tokens; set losses.object_loss=none");
  }
  if (model_cfg.global_only && !loss_cfg.use_global) {
    throw ConfigError("trainer: the global-only model needs the global loss");
  }

  const long spe = steps_per_epoch(train_set.size(), cfg.batch_size);
  const long total_steps = spe * cfg.epochs;
  const int B = static_cast<int>(std::min<std::size_t>(cfg.batch_size, train_set.size()));

  Model<float> model(model_cfg, derive_seed(cfg.seed, 0x1417));
  AdamW opt(model.params());
  long step = 0;
  double best_val = std::numeric_limits<double>::infinity();

  if (!opts.resume_from.empty()) {
    const Checkpoint ckpt = load_checkpoint(opts.resume_from);
    ParameterSet<float> params;
    for (const auto& [name, t] : ckpt.tensors) {
      if (name.rfind("param/", 0) == 0) params.adopt(name.substr(6), t);
    }
    model = Model<float>(model_cfg, std::move(params));
    opt = AdamW(model.params());
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      const std::string& name = model.params().name(i);
      auto m_it = ckpt.tensors.find("adam.m/" + name);
      auto v_it = ckpt.tensors.find("adam.v/" + name);
      if (m_it == ckpt.tensors.end() || v_it == ckpt.tensors.end()) {
        throw DataError("checkpoint lacks optimizer state for " + name + ": " + opts.resume_from.string());
      }
      opt.m[i] = m_it->second;
      opt.v[i] = v_it->second;
    }
    opt.t = ckpt.meta.at("adam_t").get<long>();
    step = ckpt.meta.at("step").get<long>();
    if (!ckpt.meta.at("best_val").is_null()) best_val = ckpt.meta.at("best_val").get<double>();
  }

  std::ofstream metrics;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    metrics.open(opts.out_dir / "metrics.jsonl", opts.resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics) throw DataError("cannot write metrics log in " + opts.out_dir.string());
  }

  TrainResult result;
  result.last_checkpoint = opts.resume_from;
  auto meta_for = [&](long at_step) {
    json meta = opts.run_meta;
    meta["step"] = at_step;
    meta["epoch"] = at_step / spe;
    meta["seed"] = cfg.seed;
    meta["best_val"] = std::isfinite(best_val) ? json(best_val) : json(nullptr);
    return meta;
  };
  auto save_last = [&](long at_step) {
    if (opts.out_dir.empty()) return;
    const auto path = opts.out_dir / "ckpt_last.bin";
    write_train_checkpoint(path, model.params(), opt, meta_for(at_step));
    result.last_checkpoint = path;
  };
  auto numeric_failure = [&](long at_step, const std::string& what) {
    const std::string ref = result.last_checkpoint.empty() ? std::string("none") : result.last_checkpoint.string();
    if (metrics.is_open()) {
      metrics << json{{"kind", "failure"}, {"step", at_step}, {"error", what}, {"last_good_checkpoint", ref}}.dump()
              << "\n";
      metrics.flush();
    }
    return NumericError("non-finite training state at step " + std::to_string(at_step) + " (" + what +
                        "); last good checkpoint: " + ref);
  };

  std::vector<std::size_t> order(train_set.size());
  while (step < total_steps) {
    if (opts.stop_after_steps >= 0 && step >= opts.stop_after_steps) break;
    const int epoch = static_cast<int>(step / spe);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 0x5EED, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    const long in_epoch = step % spe;
    std::vector<AugmentedPair> pairs(static_cast<std::size_t>(B));
    for (long s = in_epoch; s < spe && step < total_steps; ++s) {
      if (opts.stop_after_steps >= 0 && step >= opts.stop_after_steps) break;
      for (int b = 0; b < B; ++b) {
        const auto* sample = train_set[order[static_cast<std::size_t>(s) * B + b]];
        pairs[b] = augment(*sample, aug_cfg, derive_seed(cfg.seed, 0xA06, static_cast<std::uint64_t>(step), b));
      }
      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.lr = lr_schedule(step, spe, cfg);
      try {
        auto fw = forward_pairs(model, pairs, derive_seed(cfg.seed, 0x0E5, static_cast<std::uint64_t>(step)));
        auto loss = total_loss(fw.proj, loss_cfg);
        if (!std::isfinite(loss.total)) throw NumericError("loss is " + std::to_string(loss.total));
        model.params().zero_grad();
        const int K = fw.proj.slots;
        for (int v = 0; v < 2 * B; ++v) {
          MatF d_obj = K > 0 ? MatF(loss.d_obj.middleRows(v * K, K)) : MatF();
          model.backward(fw.caches[v], d_obj, loss.d_global.row(v));
        }
        rec.grad_norm = clip_grad_norm(model.params(), cfg.clip_norm);
        if (!std::isfinite(rec.grad_norm)) throw NumericError("gradient norm is not finite");
        rec.loss = loss.total;
        rec.global = loss.global;
        rec.object = loss.object;
        rec.zero_norm_slots = loss.matchings.zero_norm_slots;
      } catch (const NumericError& e) {
        throw numeric_failure(step, e.what());
      }
      opt.step(model.params(), rec.lr, cfg);
      ++step;

      result.log.push_back(rec);
      if (opts.on_step) opts.on_step(rec);
      if (metrics.is_open()) {
        json j = record_json(rec);
        if (!loss_cfg.use_global) j.erase("global");
        if (!loss_cfg.object_enabled()) j.erase("object");
        if (opts.log_wall_time) j["time"] = wall_seconds();
        metrics << j.dump() << "\n";
      }
      if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) save_last(step);
    }

    if (step % spe == 0 && step > 0) {
      // Epoch boundary: validation, best checkpoint, periodic checkpoint.
      if (!val_set.empty()) {
        double val = 0.0;
        try {
          val = evaluate_loss(model, val_set, loss_cfg, aug_cfg, cfg.batch_size, derive_seed(cfg.seed, 0x7A1));
        } catch (const NumericError& e) {
          throw numeric_failure(step, std::string("validation: ") + e.what());
        }
        if (!std::isfinite(val)) throw numeric_failure(step, "validation loss is not finite");
        result.val_losses.push_back(val);
        if (metrics.is_open()) {
          metrics << json{{"kind", "val"}, {"step", step}, {"epoch", step / spe - 1}, {"val_loss", val}}.dump()
                  << "\n";
        }
        if (val < best_val) {
          best_val = val;
          if (!opts.out_dir.empty()) {
            write_train_checkpoint(opts.out_dir / "ckpt_best.bin", model.params(), opt, meta_for(step));
          }
        }
      }
      if (cfg.checkpoint_every == 0 || step % cfg.checkpoint_every != 0) save_last(step);
    }
  }
  if (opts.stop_after_steps >= 0 && step % spe != 0) save_last(step);
  if (metrics.is_open()) metrics.flush();

  result.params = model.params();
  result.steps = step;
  result.best_val = best_val;
  return result;
}

}  // namespace osr

// osr: synthetic-scene object-centric training experiments.
//
//   osr gen-data [--config NAME|FILE] [--set k=v]... [--out DIR]
//   osr run      [--config NAME|FILE] [--set k=v]... [--seed N]... [--force]
//   osr grid     [--config ...] --attention slot,cross --loss ctrall,ctrimg,cossim --seeds 0..3
//   osr report   DIR... [--out DIR]
//   osr eval-only RUN_DIR [--force]
//
// Exit codes: 0 ok, 1 configuration error, 2 runtime failure.

#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "osr/config.hpp"
#include "osr/dataset.hpp"
#include "osr/experiment.hpp"
#include "osr/report.hpp"

namespace fs = std::filesystem;
using namespace osr;

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> parse_doubles(const std::string& text) {
  std::vector<double> out;
  for (const auto& s : split_list(text)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(s, &used));
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + s + "'");
    }
  }
  return out;
}

void log_line(const std::string& msg) { std::cerr << "[osr] " << msg << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Object-centric representation experiments on synthetic scenes"};
  app.require_subcommand(1);
  std::string run_root_opt;
  app.add_option("--run-root", run_root_opt, std::string("Run directory root (default $") + kRunRootEnv + " or ./runs)");

  std::string config = "default";
  std::vector<std::string> sets;
  auto add_config_opts = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config, "Preset name or JSON config file");
    cmd->add_option("--set", sets, "Override, e.g. --set trainer.epochs=4")->allow_extra_args(false);
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  add_config_opts(gen);
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory (default: the run root's data cache)");

  auto* run = app.add_subcommand("run", "Train and evaluate one config");
  add_config_opts(run);
  std::vector<std::uint64_t> run_seeds;
  bool force = false;
  run->add_option("--seed", run_seeds, "Seed(s); default: the config's seed list");
  run->add_flag("--force", force, "Re-run completed runs (old directories are moved aside)");

  auto* grid = app.add_subcommand("grid", "Run a Cartesian grid of configs");
  add_config_opts(grid);
  std::string g_att, g_loss, g_global, g_seeds, g_cmin, g_cmax, g_report;
  grid->add_option("--attention", g_att, "Comma list of slot, cross, global");
  grid->add_option("--loss", g_loss, "Comma list of ctrall, ctrimg, cossim, none");
  grid->add_option("--global-loss", g_global, "Comma list of on, off");
  grid->add_option("--seeds", g_seeds, "Seed list, e.g. 0..3 or 0,5");
  grid->add_option("--crop-min", g_cmin, "Comma list of crop scale minima");
  grid->add_option("--crop-max", g_cmax, "Comma list of crop scale maxima (pairs with min < max are run)");
  grid->add_option("--report", g_report, "Write an aggregate report into this directory");
  grid->add_flag("--force", force, "Re-run completed runs instead of reusing them");

  auto* rep = app.add_subcommand("report", "Aggregate completed runs into tables and plots");
  std::vector<std::string> rep_inputs;
  std::string rep_out = "report";
  rep->add_option("dirs", rep_inputs, "Run directories or directories of runs")->required();
  rep->add_option("--out", rep_out, "Output directory");

  auto* ev = app.add_subcommand("eval-only", "Re-evaluate the checkpoint of a completed run");
  std::string ev_dir;
  ev->add_option("run_dir", ev_dir, "Run directory")->required();
  ev->add_flag("--force", force, "Overwrite an existing eval_only.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const fs::path run_root = run_root_opt.empty() ? default_run_root() : fs::path(run_root_opt);
    auto resolved = [&] { return with_overrides(load_config(config), sets); };

    if (*gen) {
      const ExperimentConfig cfg = resolved();
      const fs::path dir = gen_out.empty() ? dataset_dir(run_root, cfg.data) : fs::path(gen_out);
      const Dataset& d = ensure_dataset(dir, cfg.data);
      std::cout << dir.string() << "\n";
      log_line("dataset with " + std::to_string(d.samples.size()) + " samples");
      return 0;
    }
    if (*run) {
      const ExperimentConfig cfg = resolved();
      const auto seeds = run_seeds.empty() ? cfg.seeds : run_seeds;
      for (auto seed : seeds) {
        auto out = run_single(cfg, seed, run_root, force ? ExistingRun::replace : ExistingRun::error, log_line);
        std::cout << out.dir.string() << "\n";
        log_line("iou=" + out.result.at("iou").dump() + " ap=" + out.result.at("ap").dump());
      }
      return 0;
    }
    if (*grid) {
      const ExperimentConfig base = resolved();
      GridSpec spec;
      spec.attention = split_list(g_att);
      spec.loss = split_list(g_loss);
      for (const auto& g : split_list(g_global)) {
        if (g != "on" && g != "off") throw ConfigError("--global-loss takes on/off, got '" + g + "'");
        spec.use_global.push_back(g == "on");
      }
      if (!g_seeds.empty()) spec.seeds = parse_seed_list(g_seeds);
      if (!g_cmin.empty() || !g_cmax.empty()) {
        auto mins = g_cmin.empty() ? std::vector<double>{base.augment.crop_scale_min} : parse_doubles(g_cmin);
        auto maxs = g_cmax.empty() ? std::vector<double>{base.augment.crop_scale_max} : parse_doubles(g_cmax);
        for (double lo : mins) {
          for (double hi : maxs) {
            if (lo < hi) spec.crops.push_back({lo, hi});
          }
        }
        if (spec.crops.empty()) throw ConfigError("no crop pair with min < max");
      }
      const auto configs = expand_grid(base, spec);
      std::vector<fs::path> dirs;
      std::size_t total = 0;
      for (const auto& c : configs) total += c.seeds.size();
      log_line(std::to_string(total) + " runs");
      for (const auto& c : configs) {
        for (auto seed : c.seeds) {
          auto out = run_single(c, seed, run_root, force ? ExistingRun::replace : ExistingRun::reuse, log_line);
          std::cout << out.dir.string() << "\n";
          dirs.push_back(out.dir);
        }
      }
      if (!g_report.empty()) write_report(collect_runs(dirs), g_report);
      return 0;
    }
    if (*rep) {
      std::vector<fs::path> inputs(rep_inputs.begin(), rep_inputs.end());
      const auto runs = collect_runs(inputs);
      write_report(runs, rep_out);
      std::cout << (fs::path(rep_out) / "report.md").string() << "\n";
      return 0;
    }
    if (*ev) {
      auto r = eval_only(ev_dir, force);
      std::cout << r.dump(2) << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

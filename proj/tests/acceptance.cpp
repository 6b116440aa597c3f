// Acceptance checks, one line per criterion. Exit status is the number of failed criteria.
//
//   osr_acceptance [--only N[,N...]] [--runs DIR]
//
// Criterion 7 trains the 6 x 3 directional grid under DIR (default: OSR_ACCEPTANCE_RUNS or the
// build tree); completed runs found there are reused and their recorded timings are counted.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "osr/assignment.hpp"
#include "osr/backbone.hpp"
#include "osr/config.hpp"
#include "osr/evalsuite.hpp"
#include "osr/experiment.hpp"
#include "osr/grouping.hpp"
#include "osr/heads.hpp"
#include "osr/losses.hpp"
#include "osr/trainer.hpp"
#include "temp_dir.hpp"

using namespace osr;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail << "first failure: " << what << "; ";
    pass = pass && ok;
  }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<int> random_permutation(std::mt19937_64& rng, int k) {
  std::vector<int> p(k);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

void perturb(ParameterSet<double>& ps, std::mt19937_64& rng, double scale) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& v = ps.value_at(i);
    v += oracle::random_matrix(rng, static_cast<int>(v.rows()), static_cast<int>(v.cols()), scale);
  }
}

BatchProjections<double> random_batch(std::mt19937_64& rng, int B, int K, int dp, int d) {
  BatchProjections<double> b;
  b.batch = B;
  b.slots = K;
  b.p_global = oracle::random_matrix(rng, 2 * B, dp);
  b.p_obj = oracle::random_matrix(rng, 2 * B * K, dp);
  b.s_obj = oracle::random_matrix(rng, 2 * B * K, d);
  return b;
}

// ---------------------------------------------------------------------------- 1

void hungarian_oracle(Verdict& v) {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double solver_s = 0.0;
  int checked = 0;
  for (int k = 2; k <= 7; ++k) {
    for (int t = 0; t < 1000; ++t) {
      MatD c(k, k);
      for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = u(rng);
      const auto t0 = Clock::now();
      const auto a = hungarian(c);
      solver_s += seconds_since(t0);
      const auto best = oracle::brute_force_assignment(c);
      double total = 0.0;
      for (int i = 0; i < k; ++i) total += c(i, a.sigma[i]);
      v.require(total == best.cost, "K=" + std::to_string(k) + " cost differs from the exhaustive minimum");
      ++checked;
    }
  }
  v.require(solver_s < 1.0, "solver time over 1 s");
  v.detail << checked << " matrices, solver " << std::fixed << std::setprecision(3) << solver_s << " s";
}

// ---------------------------------------------------------------------------- 2

void loss_closed_forms(Verdict& v) {
  auto constant = [](int B, int K, int d) {
    BatchProjections<double> b;
    b.batch = B;
    b.slots = K;
    b.p_global = MatD::Ones(2 * B, d);
    b.p_obj = MatD::Ones(2 * B * K, d);
    b.s_obj = MatD::Ones(2 * B * K, d);
    return b;
  };
  Matchings id;
  std::vector<int> iota11(11);
  std::iota(iota11.begin(), iota11.end(), 0);
  id.sigma.assign(2, iota11);

  const double g = global_loss(constant(2, 1, 8), 0.1);
  const double ctr = object_loss_contrastive(constant(1, 11, 8), id, 0.1, ObjectLoss::ctr_img);
  BatchProjections<double> unit = constant(1, 11, 8);
  unit.p_obj /= std::sqrt(8.0);
  unit.s_obj = unit.p_obj;
  const double cos = object_loss_cossim(unit, id);
  v.require(std::abs(g - std::log(3.0)) <= 1e-9, "global loss != ln 3");
  v.require(std::abs(ctr - std::log(21.0)) <= 1e-9, "CtrImg != ln 21");
  v.require(std::abs(cos + 1.0) <= 1e-9, "CosSim != -1");
  v.detail << std::scientific << std::setprecision(1) << "errors " << std::abs(g - std::log(3.0)) << ", "
           << std::abs(ctr - std::log(21.0)) << ", " << std::abs(cos + 1.0);
}

// ---------------------------------------------------------------------------- 3

void efficient_vs_naive(Verdict& v) {
  std::mt19937_64 rng(303);
  double worst = 0.0;
  for (int B : {2, 4, 8}) {
    for (int t = 0; t < 5; ++t) {
      auto b = random_batch(rng, B, 11, 16, 16);
      const double tau = 0.1;
      const auto m = compute_matchings(b);
      const auto m_ref = compute_matchings_per_view(b);
      worst = std::max(worst, std::abs(global_loss(b, tau) - global_loss_reference(b, tau)));
      for (auto neg : {ObjectLoss::ctr_all, ObjectLoss::ctr_img}) {
        worst = std::max(worst, std::abs(object_loss_contrastive(b, m, tau, neg) -
                                         object_loss_contrastive_reference(b, m_ref, tau, neg)));
      }
      worst = std::max(worst, std::abs(object_loss_cossim(b, m) - object_loss_cossim_reference(b, m_ref)));
    }
  }
  v.require(worst <= 1e-6, "difference above 1e-6");
  v.detail << "max |batched - reference| = " << std::scientific << std::setprecision(2) << worst;
}

// ---------------------------------------------------------------------------- 4

void gradient_checks(Verdict& v) {
  std::mt19937_64 rng(404);
  std::map<std::string, double> errors;

  {  // losses
    auto b = random_batch(rng, 3, 4, 6, 6);
    const double tau = 0.4;
    const auto m = compute_matchings(b);
    MatD grad;
    global_loss(b, tau, &grad);
    errors["loss.global"] = oracle::gradient_relative_error([&] { return global_loss(b, tau); }, b.p_global, grad);
    for (auto neg : {ObjectLoss::ctr_all, ObjectLoss::ctr_img}) {
      object_loss_contrastive(b, m, tau, neg, &grad);
      errors["loss." + to_string(neg)] = oracle::gradient_relative_error(
          [&] { return object_loss_contrastive(b, m, tau, neg); }, b.p_obj, grad);
    }
    object_loss_cossim(b, m, &grad);
    errors["loss.cossim"] =
        oracle::gradient_relative_error([&] { return object_loss_cossim(b, m); }, b.p_obj, grad);
  }
  {  // slot attention with GRU update, 1 and 3 iterations
    for (int iterations : {1, 3}) {
      const int k = 4, n = 9, d = 16;
      GroupingConfig gc;
      gc.queries.num_queries = k;
      gc.slot_iterations = iterations;
      ParameterSet<double> ps;
      Grouping<double> g(ps, gc, d, rng);
      perturb(ps, rng, 0.5);
      MatD patches = oracle::random_matrix(rng, n, d);
      const MatD w = oracle::random_matrix(rng, k, d);
      auto loss = [&] {
        GroupingCache<double> c;
        return (g.forward(ps, patches, 0, c).slots.array() * w.array()).sum();
      };
      MatD dpatches;
      auto acc = [&] {
        GroupingCache<double> c;
        g.forward(ps, patches, 0, c);
        dpatches = g.backward(ps, c, w);
      };
      const std::string tag = "slot_attention.it" + std::to_string(iterations);
      errors[tag] = gradcheck::max_param_error(ps, loss, acc);
      errors[tag + ".input"] = oracle::gradient_relative_error(loss, patches, dpatches);
    }
  }
  {  // backbone with CLS token
    BackboneConfig bc;
    bc.image_size = 8;
    bc.patch_size = 4;
    bc.embed_dim = 16;
    bc.num_heads = 2;
    bc.mlp_hidden = 32;
    bc.use_cls_token = true;
    ParameterSet<double> ps;
    Backbone<double> bb(ps, bc, rng);
    perturb(ps, rng, 0.3);
    Image img(8, 8);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (auto& x : img.data) x = u(rng);
    const MatD w = oracle::random_matrix(rng, 4, 16);
    const MatD wc = oracle::random_matrix(rng, 1, 16);
    auto loss = [&] {
      BackboneCache<double> c;
      auto out = bb.encode(ps, img, c);
      return (out.tokens.array() * w.array()).sum() + (out.cls.array() * wc.array()).sum();
    };
    auto acc = [&] {
      BackboneCache<double> c;
      bb.encode(ps, img, c);
      RowVec<double> dcls = wc;
      bb.backward(ps, c, w, &dcls);
    };
    errors["backbone"] = gradcheck::max_param_error(ps, loss, acc);
  }
  {  // heads: object projection and global branch
    ParameterSet<double> ps;
    Heads<double> heads(ps, HeadsConfig{16, 12}, 16, true, rng);
    perturb(ps, rng, 0.3);
    MatD slots = oracle::random_matrix(rng, 5, 16);
    const MatD wo = oracle::random_matrix(rng, 5, 16);
    const MatD wg = oracle::random_matrix(rng, 1, 16);
    auto loss = [&] {
      HeadsCache<double> c;
      const double a = (heads.project_objects(ps, slots, c).array() * wo.array()).sum();
      return a + (heads.global_branch(ps, slots, c).proj.array() * wg.array()).sum();
    };
    MatD dslots;
    auto acc = [&] {
      HeadsCache<double> c;
      heads.project_objects(ps, slots, c);
      dslots = heads.project_objects_backward(ps, c, wo);
      heads.global_branch(ps, slots, c);
      dslots += heads.global_backward(ps, c, wg);
    };
    errors["heads"] = gradcheck::max_param_error(ps, loss, acc);
    errors["heads.input"] = oracle::gradient_relative_error(loss, slots, dslots);
  }
  double worst = 0.0;
  for (const auto& [name, e] : errors) {
    v.require(e < 1e-4, name + " relative error " + std::to_string(e));
    worst = std::max(worst, e);
  }
  v.detail << errors.size() << " checks at float64, D <= 16, worst relative error " << std::scientific
           << std::setprecision(2) << worst;
}

// ---------------------------------------------------------------------------- 5

void slot_normalization(Verdict& v) {
  std::mt19937_64 rng(505);
  std::uniform_int_distribution<int> kd(1, 11), nd(1, 64);
  double worst = 0.0, min_mass = 1e300;
  for (int t = 0; t < 100; ++t) {
    const int k = kd(rng), n = nd(rng), d = 16;
    GroupingConfig gc;
    gc.queries.num_queries = k;
    ParameterSet<double> ps;
    Grouping<double> g(ps, gc, d, rng);  // initialized weights; queries and patches are the random inputs
    GroupingCache<double> cache;
    const MatD patches = oracle::random_matrix(rng, n, d, 2.0);
    const MatD q = oracle::random_matrix(rng, k, d);
    const auto out = g.slot_attention(ps, q, patches, cache);
    for (int j = 0; j < n; ++j) worst = std::max(worst, std::abs(out.attention.col(j).sum() - 1.0));
    for (int i = 0; i < k; ++i) {
      worst = std::max(worst, std::abs(out.renormalized.row(i).sum() - 1.0));
      min_mass = std::min(min_mass, out.attention.row(i).sum());
    }

    const auto perm = random_permutation(rng, k);
    MatD qp(k, d);
    for (int i = 0; i < k; ++i) qp.row(perm[i]) = q.row(i);
    GroupingCache<double> c2;
    const auto outp = g.slot_attention(ps, qp, patches, c2);
    bool exact = true;
    for (int i = 0; i < k; ++i) {
      exact = exact && outp.slots.row(perm[i]) == out.slots.row(i) && outp.attention.row(perm[i]) == out.attention.row(i);
    }
    v.require(exact, "slots not exactly permuted (trial " + std::to_string(t) + ")");
  }
  v.require(worst <= 1e-6, "sum off by more than 1e-6");
  // Rows are divided by (mass + 1e-8), so a slot holding mass m sums to 1 - 1e-8 / m.
  v.detail << "100 inputs, max |sum - 1| = " << std::scientific << std::setprecision(2) << worst
           << ", smallest slot mass " << min_mass << ", permutation equivariance exact";
}

// ---------------------------------------------------------------------------- 6

Plane rect(int h, int w, int y0, int x0, int y1, int x1) {
  Plane p(h, w);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) p.at(y, x) = 1.0f;
  }
  return p;
}

void evaluation_oracles(Verdict& v) {
  std::mt19937_64 rng(606);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> vals(static_cast<std::size_t>(std::uniform_int_distribution<int>(2, 400)(rng)));
    for (auto& x : vals) {
      const double z = u(rng);
      x = t % 3 == 0 ? z : t % 3 == 1 ? z * z * z : (u(rng) < 0.3 ? 0.7 + 0.1 * z : 0.2 * z);
    }
    const auto expected = oracle::exhaustive_otsu_partition(vals);
    const auto r = otsu_threshold(vals);
    bool same = true;
    for (std::size_t i = 0; i < vals.size(); ++i) same = same && (vals[i] > r.threshold ? 1 : 0) == expected[i];
    v.require(same, "Otsu partition differs from the exhaustive scan");
  }
  std::uniform_int_distribution<int> coord(0, 15);
  for (int t = 0; t < 300; ++t) {
    const int g = 1 + t % 6, p = t % 8;
    auto random_rect = [&] {
      int y0 = coord(rng), x0 = coord(rng), y1 = coord(rng), x1 = coord(rng);
      if (y0 > y1) std::swap(y0, y1);
      if (x0 > x1) std::swap(x0, x1);
      return rect(16, 16, y0, x0, y1 + 1, x1 + 1);
    };
    std::vector<Plane> gt, pred;
    for (int i = 0; i < g; ++i) gt.push_back(random_rect());
    for (int i = 0; i < p; ++i) pred.push_back(random_rect());
    v.require(std::abs(*image_iou(gt, pred) - oracle::brute_force_mean_iou(gt, pred)) < 1e-12,
              "IoU matching differs from brute force");
  }
  double worst_ap = 0.0;
  for (double rho : {0.05, 0.2, 0.5}) {
    MatD s(1, 50000), y(1, 50000);
    for (int i = 0; i < 50000; ++i) {
      s(0, i) = u(rng);
      y(0, i) = u(rng) < rho ? 1 : 0;
    }
    worst_ap = std::max(worst_ap, std::abs(average_precision(s, y) - rho));
  }
  v.require(worst_ap <= 0.02, "random-score AP off prevalence by more than 0.02");
  v.detail << "Otsu 100/100, IoU 300/300, random-score AP within " << std::fixed << std::setprecision(4)
           << worst_ap << " of prevalence";
}

// ---------------------------------------------------------------------------- 7

struct GroupStats {
  std::vector<double> iou, ap;
  double mean(const std::vector<double>& x) const {
    double s = 0;
    for (double a : x) s += a;
    return x.empty() ? std::nan("") : s / static_cast<double>(x.size());
  }
};

void directional(Verdict& v, const fs::path& run_root) {
  const std::vector<std::string> names{"slot_cossim", "cross_cossim", "slot_ctrimg",
                                       "global_only", "slot_ctrimg_objonly", "slot_ctrall"};
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  std::map<std::string, GroupStats> stats;
  double recorded_s = 0.0;
  int reused = 0;
  const auto t0 = Clock::now();
  for (const auto& name : names) {
    for (auto seed : seeds) {
      auto out = run_single(preset(name), seed, run_root, ExistingRun::reuse,
                            [](const std::string& m) { std::cerr << "[acceptance] " << m << "\n"; });
      reused += out.reused;
      const auto& r = out.result;
      if (r.contains("seconds")) recorded_s += r["seconds"]["train"].get<double>() + r["seconds"]["eval"].get<double>();
      if (!r.at("iou").is_null()) stats[name].iou.push_back(r.at("iou").get<double>());
      if (!r.at("ap").is_null()) stats[name].ap.push_back(r.at("ap").get<double>());
      std::cerr << "[acceptance] " << name << " seed " << seed << ": iou=" << r.at("iou").dump()
                << " ap=" << r.at("ap").dump() << (out.reused ? " (reused)" : "") << "\n";
    }
  }
  const double wall = seconds_since(t0);
  auto iou = [&](const std::string& n) { return 100.0 * stats[n].mean(stats[n].iou); };
  auto ap = [&](const std::string& n) { return 100.0 * stats[n].mean(stats[n].ap); };
  const double a = iou("slot_cossim") - iou("cross_cossim");
  const double b = ap("slot_ctrimg") - ap("global_only");
  const double c = iou("slot_ctrimg") - iou("slot_ctrimg_objonly");
  const double d = iou("slot_ctrimg") - iou("slot_ctrall");
  v.require(a >= 5.0, "(a) slot vs cross CosSim IoU gap below 5 points");
  v.require(b >= 5.0, "(b) slot CtrImg vs global-only AP gap below 5 points");
  v.require(c >= 10.0, "(c) objects-only IoU not 10 points below joint");
  v.require(d > 0.0, "(d) CtrAll IoU not below CtrImg");
  // Timing: sum of the recorded per-run train + eval times (reused runs included).
  v.require(recorded_s < 3600.0, "grid compute time over 60 min");
  v.detail << std::fixed << std::setprecision(1) << "(a) " << iou("slot_cossim") << " vs " << iou("cross_cossim")
           << " IoU [" << (a >= 5 ? "ok" : "FAIL") << "]; (b) " << ap("slot_ctrimg") << " vs " << ap("global_only")
           << " AP [" << (b >= 5 ? "ok" : "FAIL") << "]; (c) " << iou("slot_ctrimg_objonly") << " vs "
           << iou("slot_ctrimg") << " IoU [" << (c >= 10 ? "ok" : "FAIL") << "]; (d) " << iou("slot_ctrall")
           << " vs " << iou("slot_ctrimg") << " IoU [" << (d > 0 ? "ok" : "FAIL") << "]; 18 runs, "
           << recorded_s / 60.0 << " min recorded compute (" << reused << " reused, " << wall / 60.0
           << " min this invocation)";
}

// ---------------------------------------------------------------------------- 8

void schedule(Verdict& v) {
  TrainConfig c;  // warmup 2 epochs to 7e-4, cosine to 3e-4 at epoch 10
  const long spe = steps_per_epoch(5000, c.batch_size);
  v.require(lr_schedule(0, spe, c) == 0.0, "lr(0) != 0");
  v.require(lr_schedule(2 * spe, spe, c) == 7e-4, "lr(end of warmup) != 7e-4");
  v.require(lr_schedule(10 * spe, spe, c) == 3e-4, "lr(end) != 3e-4");
  const double slope = 7e-4 / static_cast<double>(2 * spe);
  const double left = lr_schedule(2 * spe - 1, spe, c) + slope;
  const double gap = std::max(std::abs(left - 7e-4), std::abs(lr_schedule(2 * spe, spe, c) - 7e-4));
  v.require(gap <= 1e-12, "discontinuity at the warmup boundary");
  v.detail << "lr(0)=0, lr(" << 2 * spe << ")=7e-4, lr(" << 10 * spe << ")=3e-4, boundary gap " << std::scientific
           << std::setprecision(1) << gap;
}

// ---------------------------------------------------------------------------- 9

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + OSR_CLI_PATH + "\" " + args + " >> \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void end_to_end(Verdict& v) {
  TempDir tmp("acceptance-e2e");
  const fs::path runs = tmp.path / "runs", log = tmp.path / "log.txt";
  const std::string root = "--run-root \"" + runs.string() + "\" ";
  const auto t0 = Clock::now();
  const int gen = run_cli(root + "gen-data --config smoke", log);
  const int run = run_cli(root + "run --config smoke", log);
  const int rep = run_cli("report \"" + runs.string() + "\" --out \"" + (tmp.path / "report").string() + "\"", log);
  const double s = seconds_since(t0);
  v.require(gen == 0 && run == 0 && rep == 0, "non-zero exit code");
  v.require(s < 300.0, "took over 5 min");
  bool well_formed = false;
  try {
    const auto j = nlohmann::json::parse(std::ifstream(tmp.path / "report" / "report.json"));
    const auto& row = j.at("rows").at(0);
    well_formed = j.at("rows").size() == 1 && row.at("runs") == 1 && row.at("iou").at("mean").is_number() &&
                  row.at("ap").at("mean").is_number() && fs::exists(tmp.path / "report" / "report.md") &&
                  fs::exists(tmp.path / "report" / "iou.svg");
  } catch (const std::exception& e) {
    v.detail << "report.json: " << e.what() << "; ";
  }
  v.require(well_formed, "report missing or malformed");
  v.detail << "exit codes " << gen << "/" << run << "/" << rep << ", " << std::fixed << std::setprecision(1) << s
           << " s";
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  fs::path run_root;
  if (const char* env = std::getenv("OSR_ACCEPTANCE_RUNS")) run_root = env;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else if (a == "--runs" && i + 1 < argc) {
      run_root = argv[++i];
    } else {
      std::cerr << "usage: osr_acceptance [--only N[,N...]] [--runs DIR]\n";
      return 64;
    }
  }
  if (run_root.empty()) run_root = OSR_ACCEPTANCE_RUNS;

  const std::vector<std::pair<std::string, std::function<void(Verdict&)>>> criteria{
      {"Hungarian equals exhaustive minimum", hungarian_oracle},
      {"loss closed forms", loss_closed_forms},
      {"batched losses equal per-anchor reference", efficient_vs_naive},
      {"gradient checks", gradient_checks},
      {"slot-attention normalization and equivariance", slot_normalization},
      {"evaluation oracles", evaluation_oracles},
      {"directional reproduction", [&](Verdict& v) { directional(v, run_root); }},
      {"learning-rate schedule", schedule},
      {"end-to-end smoke", end_to_end},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    const auto t0 = Clock::now();
    try {
      criteria[i].second(v);
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << "exception: " << e.what();
    }
    failed += !v.pass;
    std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << " - " << criteria[i].first << " ("
              << v.detail.str() << ") [" << std::fixed << std::setprecision(1) << seconds_since(t0) << " s]"
              << std::endl;
  }
  return failed;
}

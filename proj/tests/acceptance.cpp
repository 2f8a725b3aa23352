// Acceptance runner: one [PASS]/[FAIL] line per criterion, exit status 0
// only if all pass. Runs the full pipeline in-process from a config (the
// default is configs/sim.ini) and then reruns it for the determinism check.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "gradchecks.hpp"
#include "pbal/experiment.hpp"
#include "signatures.hpp"

namespace fs = std::filesystem;
using namespace pbal;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failed = 0;

void report(const std::string& id, bool pass, const std::string& detail) {
  if (!pass) ++failed;
  std::printf("[%s] %s %s\n", pass ? "PASS" : "FAIL", id.c_str(), detail.c_str());
  std::fflush(stdout);
}

struct Pipeline {
  CollectedDataset data;
  TrainResult trained;
  double train_seconds = 0.0;
  std::vector<AdaptRun> adapt;
  double adapt_seconds = 0.0;
  std::map<std::string, std::vector<TrialRun>> trials;
  std::map<std::string, double> trial_seconds;
};

Pipeline run_pipeline(const ExperimentConfig& cfg) {
  Pipeline p;
  auto t0 = Clock::now();
  p.data = collect_dataset(cfg);
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, "train");
  p.trained = train_dpmpb(p.data.episodes, tc);
  p.trained.ckpt.adapt_optimizer = nn::OptimizerConfig::momentum_sgd(cfg.adapt.lr, cfg.adapt.momentum);
  p.train_seconds = seconds_since(t0);

  t0 = Clock::now();
  for (const auto& label : cfg.adapt_bodies) p.adapt.push_back(run_adaptation(cfg, p.trained.ckpt, label));
  p.adapt_seconds = seconds_since(t0);

  for (const auto& c : cfg.resolved_conditions()) {
    t0 = Clock::now();
    p.trials[c.name] = run_trials(cfg, &p.trained.ckpt, c);
    p.trial_seconds[c.name] = seconds_since(t0);
  }
  return p;
}

/// Every summary number of a pipeline run, in a fixed order.
std::vector<double> summary_numbers(const Pipeline& p) {
  std::vector<double> v;
  for (const auto& ep : p.data.episodes)
    for (const auto& s : ep.states) {
      const Vec f = s.flatten();
      v.insert(v.end(), f.data(), f.data() + f.size());
    }
  for (const auto& e : p.trained.log) v.push_back(e.train_loss);
  for (const auto& pb : p.trained.ckpt.pbs) v.insert(v.end(), pb.p.data(), pb.p.data() + pb.p.size());
  for (const auto& a : p.adapt) {
    v.push_back(a.start_distance);
    v.push_back(a.end_distance);
    for (const auto& e : a.log) v.insert(v.end(), e.p.data(), e.p.data() + e.p.size());
  }
  for (const auto& [name, runs] : p.trials) {
    const auto m = summarize(name, runs);
    v.insert(v.end(), {m.e_z, m.e_f, m.rms_du, m.overshoot_ratio, m.worst_overshoot_ratio});
    for (const auto& r : runs) v.insert(v.end(), r.record.commands.begin(), r.record.commands.end());
  }
  return v;
}

std::string file_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------

void ac1() {
  const auto t0 = Clock::now();
  test::GradReport total, dense = test::check_dense(1001), lstm = test::check_lstm_bptt(1002),
                          roll = test::check_rollout(1003);
  total.merge(dense);
  total.merge(lstm);
  total.merge(roll);
  const double s = seconds_since(t0);
  report("AC1", total.failures == 0 && s < 30.0,
         fmt::format("gradient fidelity: {} entries over 3x100 configs (dense, LSTM-BPTT, rollout "
                     "loss wrt u/p/W), {} beyond rel 1e-4, worst rel {:.2e}, {:.1f} s (limit 30 s)",
                     total.checked, total.failures, total.worst_rel, s));
}

void ac2() {
  const auto t0 = Clock::now();
  int quiet = 0, grows = 0;
  constexpr int kSeeds = 20;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    quiet += test::proposed_has_quiet_windows(seed);
    grows += test::gradual_grows(seed);
  }
  const auto inc = test::random_increments(10000, 7);
  const double ks = test::ks_uniform_statistic(inc);
  const double crit = test::ks_critical_01(inc.size());
  const double s = seconds_since(t0);
  report("AC2", quiet == kSeeds && grows == kSeeds && ks < crit && s < 60.0,
         fmt::format("collection signatures: proposed quiet windows {}/{}, gradual growth {}/{}, "
                     "random KS D={:.4f} < {:.4f} (alpha 0.01), {:.1f} s (limit 60 s)",
                     quiet, kSeeds, grows, kSeeds, ks, crit, s));
}

void ac3(const ExperimentConfig& cfg, const Pipeline& p) {
  const auto& pbs = p.trained.ckpt.pbs;
  std::vector<double> sps, aos;
  for (const auto& b : cfg.bodies) {
    sps.push_back(b.spine_pitch_deg);
    aos.push_back(b.ankle_offset_deg);
  }
  auto uniq = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
  };
  const auto sp_levels = uniq(sps), ao_levels = uniq(aos);
  auto level = [](const std::vector<double>& levels, double x) {
    return static_cast<int>(std::find(levels.begin(), levels.end(), x) - levels.begin());
  };
  auto grid_pos = [&](const std::string& label) {
    const auto& b = cfg.body(label);
    return std::pair{level(sp_levels, b.spine_pitch_deg), level(ao_levels, b.ankle_offset_deg)};
  };

  int correct = 0;
  for (std::size_t i = 0; i < pbs.size(); ++i) {
    std::size_t nn = i;
    double best = INFINITY;
    for (std::size_t j = 0; j < pbs.size(); ++j) {
      if (j == i) continue;
      const double d = (pbs[i].p - pbs[j].p).norm();
      if (d < best) best = d, nn = j;
    }
    const auto [a0, b0] = grid_pos(pbs[i].label);
    const auto [a1, b1] = grid_pos(pbs[nn].label);
    correct += std::abs(a0 - a1) + std::abs(b0 - b1) == 1;
  }

  // Per spine-pitch row: distance between the two extreme ankle offsets
  // against each adjacent pair.
  int rows_ok = 0, rows = 0;
  for (double sp : sp_levels) {
    std::vector<Vec> row;
    for (double ao : ao_levels) row.push_back(p.trained.ckpt.pb(grid_label(sp, ao)));
    if (row.size() < 3) continue;
    ++rows;
    const double extreme = (row.front() - row.back()).norm();
    double adjacent = 0.0;
    for (std::size_t k = 1; k < row.size(); ++k) adjacent = std::max(adjacent, (row[k] - row[k - 1]).norm());
    rows_ok += extreme > adjacent;
  }
  const std::size_t needed = (7 * pbs.size() + 8) / 9;
  report("AC3", correct >= static_cast<int>(needed) && rows > 0 && rows_ok == rows &&
                    p.train_seconds < 300.0,
         fmt::format("PB separability: nearest neighbour grid-adjacent for {}/{} (need {}), extreme "
                     "ankle-offset distance > adjacent in {}/{} rows, collect+train {:.0f} s (limit 300 s)",
                     correct, pbs.size(), needed, rows_ok, rows, p.train_seconds));
}

void ac4(const Pipeline& p) {
  bool ok = !p.adapt.empty();
  std::string detail;
  for (const auto& a : p.adapt) {
    const bool pass = a.nearest == a.label && a.end_distance < a.start_distance &&
                      a.log.size() == 45 && a.start.isZero();
    ok &= pass;
    detail += fmt::format("{}: {} updates, nearest {}, distance {:.3f} -> {:.3f}; ", a.label,
                          a.log.size(), a.nearest, a.start_distance, a.end_distance);
  }
  ok &= p.adapt_seconds < 60.0;
  report("AC4", ok, fmt::format("online adaptation from p=0: {}{:.1f} s (limit 60 s)", detail, p.adapt_seconds));
}

ConditionMetrics metrics(const Pipeline& p, const std::string& name) {
  return summarize(name, p.trials.at(name));
}

bool has(const Pipeline& p, std::initializer_list<const char*> names) {
  for (const char* n : names)
    if (!p.trials.count(n)) {
      report("config", false, fmt::format("condition '{}' is missing from [control] conditions", n));
      return false;
    }
  return true;
}

void ac5(const ExperimentConfig& cfg, const Pipeline& p) {
  if (!has(p, {"proposed", "none"})) return;
  const auto prop = metrics(p, "proposed"), none = metrics(p, "none");
  const double s = p.trial_seconds.at("proposed") + p.trial_seconds.at("none");
  report("AC5", prop.e_z < none.e_z && prop.overshoot_ratio <= 0.5 && s < 120.0,
         fmt::format("push recovery ({} trials, {:g} N x {:g} s): E_z proposed {:.4f} vs none {:.4f}; "
                     "second/first peak of mean z_x {:.3f} (limit 0.5, worst single trial {:.3f}); "
                     "{:.1f} s (limit 120 s)",
                     cfg.trials, cfg.disturbance.force, cfg.disturbance.duration, prop.e_z, none.e_z,
                     prop.overshoot_ratio, prop.worst_overshoot_ratio, s));
}

void ac6(const ExperimentConfig& cfg, const Pipeline& p) {
  if (!has(p, {"proposed", "cf1", "cu10"})) return;
  const auto base = cfg.condition("proposed"), cf = cfg.condition("cf1"), cu = cfg.condition("cu10");
  const bool setup = base.control.c_f == 0.0 && base.control.c_l == 30.0 && base.control.c_u == 3.0 &&
                     cf.control.c_f == 1.0 && cu.control.c_u == 10.0;
  const auto m0 = metrics(p, "proposed"), mf = metrics(p, "cf1"), mu = metrics(p, "cu10");
  const double s = p.trial_seconds.at("proposed") + p.trial_seconds.at("cf1") + p.trial_seconds.at("cu10");
  report("AC6", setup && mf.e_f < m0.e_f && mu.rms_du < m0.rms_du && s < 180.0,
         fmt::format("loss weights on matched seeds: E_f C_f=1 {:.4f} vs C_f=0 {:.4f}; RMS(du) C_u=10 "
                     "{:.4f} vs C_u=3 {:.4f}; {:.1f} s (limit 180 s)",
                     mf.e_f, m0.e_f, mu.rms_du, m0.rms_du, s));
}

void ac7(const ExperimentConfig& cfg, const Pipeline& p) {
  if (!has(p, {"proposed", "wrongpb"})) return;
  const auto right = metrics(p, "proposed"), wrong = metrics(p, "wrongpb");
  const auto c = cfg.condition("wrongpb");
  report("AC7", wrong.e_z > right.e_z && c.pb_label != cfg.control_pb,
         fmt::format("wrong PB: body {} with PB {} E_z {:.4f} vs matched PB {} E_z {:.4f}",
                     cfg.control_body, c.pb_label, wrong.e_z, cfg.control_pb, right.e_z));
}

void ac8(const Pipeline& p) {
  std::size_t ticks = 0, violations = 0, shift_checked = 0, shift_bad = 0, commands = 0, out_of_range = 0;
  for (const auto& [name, runs] : p.trials)
    for (const auto& r : runs) {
      for (double u : r.record.commands) {
        ++commands;
        out_of_range += !(u >= kThetaMin && u <= kThetaMax);
      }
      for (std::size_t k = 0; k < r.controller.size(); ++k) {
        const auto& log = r.controller[k];
        ++ticks;
        double prev = log.initial_loss;
        bool ok = !log.fault;
        for (double l : log.loss) {
          ok &= l <= prev;
          prev = l;
        }
        violations += !ok;
        if (k == 0) continue;
        ControllerState cs;
        cs.u_prev = r.controller[k - 1].u_opt;
        ++shift_checked;
        shift_bad += warm_start(cs, static_cast<int>(cs.u_prev.size())) != log.u_init ||
                     log.u_init.front() != cs.u_prev[1] || log.u_init.back() != cs.u_prev.back();
      }
    }
  report("AC8", ticks > 0 && violations == 0 && shift_bad == 0 && out_of_range == 0,
         fmt::format("MPC invariants: {}/{} ticks with non-increasing selected loss, warm-start shift "
                     "exact in {}/{} consecutive ticks, {}/{} emitted commands within [-1, 1]",
                     ticks - violations, ticks, shift_checked - shift_bad, shift_checked,
                     commands - out_of_range, commands));
}

void ac9(const ExperimentConfig& cfg, const Pipeline& first, const fs::path& work) {
  const auto t0 = Clock::now();
  const Pipeline second = run_pipeline(cfg);
  const auto a = summary_numbers(first), b = summary_numbers(second);
  std::size_t diff = a.size() == b.size() ? 0 : std::max(a.size(), b.size());
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
    diff += std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i]);
  save_checkpoint(first.trained.ckpt, (work / "first.ckpt").string());
  save_checkpoint(second.trained.ckpt, (work / "second.ckpt").string());
  const bool same_ckpt = file_bytes(work / "first.ckpt") == file_bytes(work / "second.ckpt");
  report("AC9", diff == 0 && same_ckpt,
         fmt::format("determinism: rerun of collect/train/adapt/control, {} of {} summary numbers differ "
                     "bitwise, checkpoint bytes {}, {:.0f} s",
                     diff, a.size(), same_ckpt ? "identical" : "differ", seconds_since(t0)));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string config = std::string(PBAL_CONFIG_DIR) + "/sim.ini";
  std::string work = "acceptance_work";
  bool skip_rerun = false;
  app.add_option("--config", config, "experiment config");
  app.add_option("--work", work, "scratch directory");
  app.add_flag("--skip-rerun", skip_rerun, "skip the determinism rerun");
  CLI11_PARSE(app, argc, argv);

  try {
    fs::create_directories(work);
    const auto cfg = ExperimentConfig::load(config);
    std::printf("config %s (hash %s)\n", config.c_str(), cfg.hash().substr(0, 12).c_str());

    ac1();
    ac2();
    const auto pipeline = run_pipeline(cfg);
    ac3(cfg, pipeline);
    ac4(pipeline);
    ac5(cfg, pipeline);
    ac6(cfg, pipeline);
    ac7(cfg, pipeline);
    ac8(pipeline);
    if (skip_rerun) report("AC9", false, "determinism: skipped");
    else ac9(cfg, pipeline, work);
  } catch (const std::exception& e) {
    std::printf("[FAIL] error %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}

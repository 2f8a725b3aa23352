// pbal: collect -> train -> adapt / control -> eval.
//
// Every stage reads the experiment config, writes its artifacts under --out
// and a <stage>_summary.json. Failures print one JSON line on stderr and
// exit nonzero.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>
#include <fmt/format.h>

#include "pbal/experiment.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace pbal;

namespace {

enum Exit { kOk = 0, kUsage = 64, kConfig = 65, kMissing = 66, kRuntime = 70 };

struct StageError : std::runtime_error {
  StageError(std::string kind, int code, const std::string& msg)
      : std::runtime_error(msg), kind(std::move(kind)), code(code) {}
  std::string kind;
  int code;
};

[[noreturn]] void missing(const std::string& needed_stage, const fs::path& path) {
  throw StageError("missing_artifact", kMissing,
                   fmt::format("{} not found; run 'pbal {}' first", path.string(), needed_stage));
}

struct Context {
  ExperimentConfig cfg;
  fs::path out;
  std::string hash;

  Metadata meta(const std::string& stage) const {
    return {{"stage", stage},
            {"experiment", cfg.name},
            {"config_hash", hash},
            {"seed", std::to_string(cfg.seed)}};
  }
  json header(const std::string& stage) const {
    return json{{"stage", stage}, {"experiment", cfg.name}, {"config_hash", hash}, {"seed", cfg.seed}};
  }
  fs::path manifest() const { return out / "dataset" / "manifest.csv"; }
  fs::path checkpoint() const { return out / "model.ckpt"; }

  void write_summary(const std::string& stage, const json& j) const {
    fs::create_directories(out);
    const auto path = out / (stage + "_summary.json");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw StageError("io", kRuntime, "cannot write " + path.string());
    f << j.dump(2) << '\n';
    std::cout << path.string() << '\n';
  }
};

Context load_context(const std::string& config, const std::string& out,
                     std::optional<std::uint64_t> seed) {
  Context ctx;
  if (!fs::exists(config)) throw StageError("config", kConfig, "config file " + config + " not found");
  ctx.cfg = ExperimentConfig::load(config);
  if (seed) ctx.cfg.seed = *seed;
  ctx.hash = ctx.cfg.hash();
  ctx.out = out.empty() ? fs::path("runs") / ctx.cfg.name : fs::path(out);
  return ctx;
}

Checkpoint load_model(const Context& ctx, const std::string& override_path) {
  const fs::path path = override_path.empty() ? ctx.checkpoint() : fs::path(override_path);
  if (!fs::exists(path)) missing("train", path);
  return load_checkpoint(path.string());
}

json vec_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

// ---------------------------------------------------------------------------

void cmd_collect(const Context& ctx) {
  auto data = collect_dataset(ctx.cfg);
  const auto dir = ctx.out / "dataset";
  fs::create_directories(dir);
  std::size_t k = 0, rows = 0;
  json episodes = json::array();
  for (const auto& entry : data.manifest) {
    json e{{"label", entry.label}, {"seed", entry.seed}};
    if (entry.error.empty()) {
      const auto& ep = data.episodes[k++];
      auto meta = ctx.meta("collect");
      write_episode_csv(ep, dir / entry.file, meta);
      rows += ep.size();
      e["file"] = entry.file;
      e["ticks"] = ep.size();
      e["fell"] = ep.fell;
    } else {
      e["error"] = entry.error;
    }
    episodes.push_back(e);
  }
  write_manifest(data.manifest, ctx.manifest(), ctx.meta("collect"));
  json j = ctx.header("collect");
  j["policy"] = std::string(to_string(ctx.cfg.policy));
  j["episodes"] = episodes;
  j["episode_count"] = data.episodes.size();
  j["failed"] = data.manifest.size() - data.episodes.size();
  j["rows"] = rows;
  ctx.write_summary("collect", j);
}

void cmd_train(const Context& ctx, const std::string& dataset) {
  const fs::path manifest = dataset.empty() ? ctx.manifest() : fs::path(dataset);
  if (!fs::exists(manifest)) missing("collect", manifest);
  const auto episodes = load_dataset(manifest);
  if (episodes.empty())
    throw StageError("missing_artifact", kMissing, "dataset has no usable episodes; rerun 'pbal collect'");

  TrainConfig tc = ctx.cfg.train;
  tc.seed = derive_seed(ctx.cfg.seed, "train");
  auto result = train_dpmpb(episodes, tc, [](const EpochLog& e) {
    if (e.epoch % 25 == 0)
      std::fprintf(stderr, "epoch %d train %.6g lr %.3g\n", e.epoch, e.train_loss, e.lr);
  });
  result.ckpt.adapt_optimizer = nn::OptimizerConfig::momentum_sgd(ctx.cfg.adapt.lr, ctx.cfg.adapt.momentum);
  save_checkpoint(result.ckpt, ctx.checkpoint().string());
  write_train_log_csv(result.log, ctx.out / "train_log.csv", ctx.meta("train"));

  const auto set = build_windows(episodes, std::max(tc.window, 7));
  const auto report = evaluate_model(result.ckpt, episodes, set, set.windows, 6);

  json j = ctx.header("train");
  j["epochs"] = tc.epochs;
  j["initial_loss"] = result.log.front().train_loss;
  j["final_loss"] = result.log.back().train_loss;
  j["parameters"] = result.ckpt.net.parameter_count();
  json pbs = json::object();
  for (const auto& pb : result.ckpt.pbs) pbs[pb.label] = vec_json(pb.p);
  j["pbs"] = pbs;
  j["rmse_1step"] = vec_json(report.rmse_1step);
  j["rmse_6step"] = vec_json(report.rmse_horizon);
  j["warnings"] = result.warnings;
  ctx.write_summary("train", j);
}

void cmd_adapt(const Context& ctx, const std::string& ckpt_path) {
  const auto ckpt = load_model(ctx, ckpt_path);
  auto labels = ctx.cfg.adapt_bodies;
  if (labels.empty())
    for (const auto& b : ctx.cfg.bodies) labels.push_back(b.label);
  json runs = json::array();
  for (const auto& label : labels) {
    const auto run = run_adaptation(ctx.cfg, ckpt, label);
    write_adapt_csv(run, ctx.out / fmt::format("adapt_{}.csv", label), ctx.meta("adapt"));
    const Vec end = run.log.empty() ? run.start : run.log.back().p;
    runs.push_back({{"label", label},
                    {"updates", run.log.size()},
                    {"start", vec_json(run.start)},
                    {"end", vec_json(end)},
                    {"start_distance", run.start_distance},
                    {"end_distance", run.end_distance},
                    {"nearest", run.nearest},
                    {"recognized", run.nearest == label}});
  }
  json j = ctx.header("adapt");
  j["init"] = ctx.cfg.adapt_init;
  j["runs"] = runs;
  ctx.write_summary("adapt", j);
}

json metrics_json(const ConditionMetrics& m) {
  return {{"condition", m.name},
          {"E_z", m.e_z},
          {"E_f", m.e_f},
          {"rms_du", m.rms_du},
          {"overshoot_ratio", m.overshoot_ratio},
          {"worst_overshoot_ratio", m.worst_overshoot_ratio},
          {"control_ticks", m.control_ticks},
          {"monotone_violations", m.monotone_violations},
          {"faults", m.faults}};
}

void cmd_control(const Context& ctx, const std::string& ckpt_path) {
  std::optional<Checkpoint> ckpt;
  const auto conditions = ctx.cfg.resolved_conditions();
  bool needs_model = false;
  for (const auto& c : conditions) needs_model |= c.kind == Condition::Kind::Model;
  if (needs_model) ckpt = load_model(ctx, ckpt_path);

  json results = json::array();
  json files = json::array();
  for (const auto& c : conditions) {
    const auto runs = run_trials(ctx.cfg, ckpt ? &*ckpt : nullptr, c);
    auto meta = ctx.meta("control");
    meta.emplace_back("condition", c.name);
    const auto trials_file = fmt::format("trials_{}.csv", c.name);
    write_trials_csv(runs, ctx.out / trials_file, meta);
    if (c.kind == Condition::Kind::Model)
      write_controller_csv(runs, ctx.out / fmt::format("controller_{}.csv", c.name), meta);
    files.push_back(trials_file);
    results.push_back(metrics_json(summarize(c.name, runs)));
  }
  json j = ctx.header("control");
  j["body"] = ctx.cfg.control_body;
  j["trials"] = ctx.cfg.trials;
  j["disturbance"] = {{"force", ctx.cfg.disturbance.force}, {"duration", ctx.cfg.disturbance.duration}};
  j["trial_files"] = files;
  j["conditions"] = results;
  ctx.write_summary("control", j);
}

void cmd_eval(const Context& ctx, const std::string& ckpt_path) {
  const auto control_summary = ctx.out / "control_summary.json";
  if (!fs::exists(control_summary)) missing("control", control_summary);
  json control;
  {
    std::ifstream f(control_summary);
    control = json::parse(f);
  }
  const auto plots = ctx.out / "plots";
  fs::create_directories(plots);

  json conditions = json::array();
  std::map<std::string, double> ez;
  std::ofstream series = [&] {
    std::ofstream f(plots / "zx_series.csv", std::ios::binary);
    for (const auto& [k, v] : ctx.meta("eval")) f << "# " << k << ": " << v << '\n';
    f << "condition,tick,t,mean_z_x\n";
    return f;
  }();
  std::ofstream bars(plots / "bars.csv", std::ios::binary);
  for (const auto& [k, v] : ctx.meta("eval")) bars << "# " << k << ": " << v << '\n';
  bars << "condition,E_z,E_f,rms_du\n";

  for (const auto& file : control["trial_files"]) {
    const auto path = ctx.out / file.get<std::string>();
    if (!fs::exists(path)) missing("control", path);
    const auto runs = read_trials_csv(path);
    if (runs.empty()) continue;
    const auto name = runs.front().record.condition;
    const auto m = summarize(name, runs);
    ez[name] = m.e_z;
    auto mj = metrics_json(m);
    mj.erase("control_ticks");
    mj.erase("monotone_violations");
    mj.erase("faults");
    conditions.push_back(mj);
    std::vector<TrialRecord> records;
    for (const auto& r : runs) records.push_back(r.record);
    const auto mean = mean_zx(records);
    for (std::size_t t = 0; t < mean.size(); ++t)
      series << name << ',' << t << ',' << format_double(records.front().t[t]) << ','
             << format_double(mean[t]) << '\n';
    bars << name << ',' << format_double(m.e_z) << ',' << format_double(m.e_f) << ','
         << format_double(m.rms_du) << '\n';
  }

  json j = ctx.header("eval");
  j["conditions"] = conditions;
  if (ez.count("proposed") && ez.count("none")) {
    j["proposed_vs_none"] = {{"E_z_proposed", ez["proposed"]},
                             {"E_z_none", ez["none"]},
                             {"verdict", ez["proposed"] < ez["none"] ? "proposed_better" : "proposed_not_better"}};
  }

  const fs::path ckpt_file = ckpt_path.empty() ? ctx.checkpoint() : fs::path(ckpt_path);
  if (fs::exists(ckpt_file)) {
    const auto ckpt = load_checkpoint(ckpt_file.string());
    if (ckpt.pbs.size() >= 2) {
      const auto proj = pca_project(ckpt.pbs, 2);
      std::ofstream f(plots / "pb_scatter.csv", std::ios::binary);
      for (const auto& [k, v] : ctx.meta("eval")) f << "# " << k << ": " << v << '\n';
      f << "label,pc1,pc2\n";
      json pts = json::array();
      for (std::size_t i = 0; i < proj.labels.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const double pc2 = proj.coords.cols() > 1 ? proj.coords(r, 1) : 0.0;
        f << proj.labels[i] << ',' << format_double(proj.coords(r, 0)) << ',' << format_double(pc2) << '\n';
        pts.push_back({{"label", proj.labels[i]}, {"pc1", proj.coords(r, 0)}, {"pc2", pc2}});
      }
      j["pb_pca"] = pts;
    }
  }
  ctx.write_summary("eval", j);
}

void fail(const std::string& kind, const std::string& stage, const std::string& message) {
  std::cerr << json{{"error", kind}, {"stage", stage}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Balance learning pipeline: collect, train, adapt, control, eval"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, dataset;
  std::optional<std::uint64_t> seed;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "experiment config (INI)")->required();
    sub->add_option("--out", out, "output directory (default runs/<name>)");
    sub->add_option("--seed", seed, "override the config seed");
  };
  auto* collect = app.add_subcommand("collect", "collect one episode per body state");
  auto* train = app.add_subcommand("train", "train the predictive model");
  auto* adapt = app.add_subcommand("adapt", "online PB adaptation runs");
  auto* control = app.add_subcommand("control", "push-recovery trials per condition");
  auto* eval = app.add_subcommand("eval", "metrics and plot data from control logs");
  for (auto* sub : {collect, train, adapt, control, eval}) add_common(sub);
  train->add_option("--dataset", dataset, "manifest path (default <out>/dataset/manifest.csv)");
  for (auto* sub : {adapt, control, eval})
    sub->add_option("--checkpoint", checkpoint, "checkpoint path (default <out>/model.ckpt)");

  std::string stage = "cli";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("usage", stage, e.what());
    return kUsage;
  }

  try {
    stage = app.get_subcommands().front()->get_name();
    const auto ctx = load_context(config, out, seed);
    if (stage == "collect") cmd_collect(ctx);
    else if (stage == "train") cmd_train(ctx, dataset);
    else if (stage == "adapt") cmd_adapt(ctx, checkpoint);
    else if (stage == "control") cmd_control(ctx, checkpoint);
    else if (stage == "eval") cmd_eval(ctx, checkpoint);
  } catch (const StageError& e) {
    fail(e.kind, stage, e.what());
    return e.code;
  } catch (const ConfigError& e) {
    fail("config", stage, e.what());
    return kConfig;
  } catch (const std::exception& e) {
    fail("runtime", stage, e.what());
    return kRuntime;
  }
  return kOk;
}

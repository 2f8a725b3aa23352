#pragma once

// Experiment configuration and the pipeline protocols: collection over a set
// of body states, training, online adaptation runs and push-recovery trials.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pbal/adapt.hpp"
#include "pbal/analysis.hpp"
#include "pbal/collect.hpp"
#include "pbal/dataset_io.hpp"
#include "pbal/dpmpb.hpp"
#include "pbal/mpc.hpp"
#include "pbal/plant.hpp"
#include "pbal/train.hpp"

namespace pbal {

struct PdGains {
  double kp = 0.0;
  double kd = 0.0;
};

/// A controller run under push recovery: the learned controller with its
/// own loss weights and PB, no control at all, or a PD law on z_x.
struct Condition {
  enum class Kind { Model, None, Pd };
  std::string name;
  Kind kind = Kind::Model;
  ControlConfig control;  // Model only
  std::string pb_label;   // Model only; the PB the controller uses
  PdGains pd;             // Pd only
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;

  std::vector<BodyConfig> bodies;
  PolicyKind policy = PolicyKind::Proposed;
  int steps = 300;
  CollectConstants collect;

  TrainConfig train;

  AdaptConfig adapt;
  int adapt_updates = 45;
  std::vector<std::string> adapt_bodies;
  std::string adapt_init = "zero";  // "zero" or a trained label

  ControlConfig control;
  std::string control_body;  // label of the body under control
  std::string control_pb;    // default PB label for model conditions
  Disturbance disturbance;
  int trials = 5;
  int warmup_ticks = 10;
  /// Sensor noise during trials; unset keys keep the body's own value.
  std::optional<double> trial_noise_z, trial_noise_f, trial_noise_l;
  std::map<std::string, PdGains> pd{{"pd1", {0.1, 0.1}}, {"pd2", {0.03, 0.1}}};
  /// Named overrides of the control section, usable as conditions.
  std::map<std::string, std::map<std::string, std::string>> variants;
  std::vector<std::string> conditions{"proposed", "none", "pd1", "pd2"};

  /// Parses the INI text; throws ConfigError with the offending key.
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);

  void validate() const;
  /// Canonical INI form; equal configs serialize identically.
  std::string canonical() const;
  /// SHA-256 of canonical(), hex.
  std::string hash() const;

  const BodyConfig& body(const std::string& label) const;
  Condition condition(const std::string& name) const;
  std::vector<Condition> resolved_conditions() const;
};

/// Deterministic 64-bit seed derived from a base seed and a stream tag.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0);

/// Label for a grid body state, e.g. "sp-5_ao+0".
std::string grid_label(double spine_pitch_deg, double ankle_offset_deg);

// ---------------------------------------------------------------------------
// Protocols

struct CollectedDataset {
  std::vector<Episode> episodes;
  std::vector<ManifestEntry> manifest;
};

/// One episode per body; failures are recorded in the manifest entry and
/// the run continues.
CollectedDataset collect_dataset(const ExperimentConfig& cfg);

struct AdaptRun {
  std::string label;
  Vec start;
  std::vector<AdaptLogEntry> log;
  double start_distance = 0.0;  // to the matching trained PB
  double end_distance = 0.0;
  std::string nearest;          // trained label nearest to the final p
};

/// Streams the body through the collection policy and adapts p until
/// `cfg.adapt_updates` updates have run.
AdaptRun run_adaptation(const ExperimentConfig& cfg, const Checkpoint& ckpt,
                        const std::string& body_label);

struct TrialRun {
  TrialRecord record;
  std::vector<ControlStepLog> controller;  // Model conditions only
};

/// Push-recovery trials of one condition on cfg.control_body.
std::vector<TrialRun> run_trials(const ExperimentConfig& cfg, const Checkpoint* ckpt,
                                 const Condition& condition);

struct ConditionMetrics {
  std::string name;
  double e_z = 0.0;
  double e_f = 0.0;        // mean over trials
  double rms_du = 0.0;     // mean over trials
  double overshoot_ratio = 0.0;  // of the trial-mean z_x series
  double worst_overshoot_ratio = 0.0;
  std::size_t control_ticks = 0;
  std::size_t monotone_violations = 0;
  std::size_t faults = 0;
};

ConditionMetrics summarize(const std::string& name, const std::vector<TrialRun>& runs);

// ---------------------------------------------------------------------------
// File formats shared by the CLI stages

void write_trials_csv(const std::vector<TrialRun>& runs, const std::filesystem::path& path,
                      const Metadata& meta);
std::vector<TrialRun> read_trials_csv(const std::filesystem::path& path);
void write_controller_csv(const std::vector<TrialRun>& runs, const std::filesystem::path& path,
                          const Metadata& meta);
void write_train_log_csv(const std::vector<EpochLog>& log, const std::filesystem::path& path,
                         const Metadata& meta);
void write_adapt_csv(const AdaptRun& run, const std::filesystem::path& path, const Metadata& meta);

}  // namespace pbal

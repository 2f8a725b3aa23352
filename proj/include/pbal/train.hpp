#pragma once

// Offline training: stride-1 windows over labeled episodes, teacher-forced
// one-step prediction, joint Adam updates of the weights and one PB per
// body-state label.

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pbal/collect.hpp"
#include "pbal/dpmpb.hpp"

namespace pbal {

struct TrainConfig {
  int window = 10;
  int batch = 64;
  int epochs = 300;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Tail fraction of every episode held out for validation.
  double val_fraction = 0.0;
  std::uint64_t seed = 0;
  int n_p = 2;

  /// Learning-rate halving on plateau of the monitored loss (validation if
  /// present, else training).
  int plateau_patience = 10;
  double plateau_threshold = 1e-3;  // relative improvement that resets the wait
  double plateau_factor = 0.5;
  int max_lr_drops = 2;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct Window {
  std::size_t episode = 0;
  std::size_t start = 0;
  std::size_t label = 0;  // index into WindowSet::labels
};

struct WindowSet {
  std::vector<std::string> labels;  // in order of first appearance
  std::vector<Window> windows;
  std::vector<std::string> warnings;
  int length = 0;
};

/// Every stride-1 window of `window` consecutive (s, u) pairs. Episodes
/// shorter than the window are skipped with a warning.
WindowSet build_windows(std::span<const Episode> episodes, int window);

struct EpochLog {
  int epoch = 0;  // 0 is the untrained model
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
};

struct TrainResult {
  Checkpoint ckpt;
  std::vector<EpochLog> log;
  std::vector<std::string> warnings;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Throws TrainingError on a non-finite loss and std::invalid_argument on an
/// empty dataset.
TrainResult train_dpmpb(std::span<const Episode> episodes, const TrainConfig& tc,
                        const EpochCallback& on_epoch = {});

/// Mean squared error of teacher-forced one-step predictions in normalized
/// units over the given windows, using each window's trained PB.
double window_loss(const Checkpoint& ckpt, std::span<const Episode> episodes,
                   const WindowSet& set, std::span<const Window> windows);

struct EvalReport {
  Vec rmse_1step;  // per sensor dimension, physical units
  Vec rmse_horizon;
  int horizon = 6;
  std::size_t windows = 0;
};

/// One-step (teacher-forced) and `horizon`-step (closed-loop) RMSE per
/// sensor dimension. Windows must span at least horizon + 1 ticks; labels
/// must have a trained PB.
EvalReport evaluate_model(const Checkpoint& ckpt, std::span<const Episode> episodes,
                          const WindowSet& set, std::span<const Window> windows, int horizon = 6);

}  // namespace pbal

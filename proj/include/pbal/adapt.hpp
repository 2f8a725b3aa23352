#pragma once

// Online PB-only adaptation with frozen weights.

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "pbal/dpmpb.hpp"

namespace pbal {

struct AdaptConfig {
  std::size_t capacity = 50;   // FIFO size
  std::size_t threshold = 50;  // buffer length at which updates start
  double lr = 0.01;
  double momentum = 0.9;

  static AdaptConfig from_checkpoint(const Checkpoint& ckpt);
  void validate() const;
};

struct AdaptLogEntry {
  std::size_t update = 0;
  Vec p;              // after the update
  double loss = 0.0;  // buffer loss before the update, normalized units
  double wall_ms = 0.0;
  bool skipped = false;
};

class PbAdapter {
 public:
  /// The checkpoint must outlive the adapter; its weights are only read.
  PbAdapter(const Checkpoint& ckpt, Vec p0, AdaptConfig cfg);

  /// Appends (s, u), evicting the oldest pair beyond capacity, and runs one
  /// update once the buffer has reached the threshold. Returns true if an
  /// update ran.
  bool observe(const SensorState& s, double u);

  /// One epoch over the buffer as a single sequence from a zero hidden
  /// state: teacher-forced one-step MSE, one momentum step on p. Throws
  /// std::logic_error if the buffer is below the threshold.
  void update_pb();

  /// Buffer loss at the current p without updating.
  double buffer_loss() const;

  const Vec& p() const { return p_; }
  std::size_t updates() const { return updates_; }
  std::size_t buffer_size() const { return states_.size(); }
  const std::deque<SensorState>& buffer_states() const { return states_; }
  const std::deque<double>& buffer_commands() const { return commands_; }
  const std::vector<AdaptLogEntry>& log() const { return log_; }
  const AdaptConfig& config() const { return cfg_; }

 private:
  const Checkpoint* ckpt_;
  AdaptConfig cfg_;
  Vec p_;
  nn::Optimizer opt_;
  std::deque<SensorState> states_;
  std::deque<double> commands_;
  std::size_t updates_ = 0;
  std::vector<AdaptLogEntry> log_;
};

}  // namespace pbal

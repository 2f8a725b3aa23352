#pragma once

// Gradient-based MPC through the learned model: warm start, N_ctrl_epoch
// rounds of gradient steps with a learning-rate grid, best candidate kept.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "pbal/dpmpb.hpp"

namespace pbal {

/// How the model's LSTM state follows the real system between ticks.
enum class HiddenMode {
  Persist,  // carried across ticks, advanced with each observed (s, u)
  Rewarm,   // rebuilt every tick from zero over the last `rewarm_ticks` pairs
};

std::string_view to_string(HiddenMode mode);
HiddenMode parse_hidden_mode(std::string_view name);

/// Space the state terms of the loss are measured in.
enum class LossSpace {
  Physical,    // raw sensor units
  Normalized,  // each channel divided by its training standard deviation
};

std::string_view to_string(LossSpace space);
LossSpace parse_loss_space(std::string_view name);

struct ControlConfig {
  int n_step = 6;
  int n_batch = 10;
  int n_epoch = 3;
  double gamma_max = 0.1;
  double c_f = 0.0;
  double c_l = 30.0;
  double c_u = 3.0;
  Eigen::Vector2d z_ref = Eigen::Vector2d::Zero();
  LossSpace space = LossSpace::Normalized;
  HiddenMode hidden = HiddenMode::Persist;
  int rewarm_ticks = 5;
  double theta_min = kThetaMin;
  double theta_max = kThetaMax;

  void validate() const;
};

/// {0} followed by n_batch - 1 values spaced geometrically from
/// gamma_max / 100 up to gamma_max.
std::vector<double> gamma_grid(const ControlConfig& cc);

/// Per-channel divisors applied to the state terms (ones for Physical).
Vec loss_scale(const Checkpoint& ckpt, const ControlConfig& cc);

/// ||z - z_ref|| + C_f ||f[3:N] - f[2:N-1]|| + C_l ||l[3:N] - l[2:N-1]|| + C_u ||u||
/// with 1-indexed slices over the predicted horizon. `scale` divides each
/// flattened state channel; empty means no scaling.
double control_loss(std::span<const SensorState> pred, std::span<const double> u,
                    const ControlConfig& cc, const Vec& scale = {});

/// Same loss on a batch: states[k] is n_s x B (physical), u is N x B.
Eigen::RowVectorXd control_loss_batch(std::span<const Mat> states, const Mat& u,
                                      const ControlConfig& cc, const Vec& scale);

struct LossGradient {
  std::vector<Vec> d_state;  // dL/d pred[k], flattened physical
  std::vector<double> d_u;   // direct dL/du (the C_u term)
};

/// Gradient of control_loss. Norms with zero residual contribute zero.
LossGradient control_loss_grad(std::span<const SensorState> pred, std::span<const double> u,
                               const ControlConfig& cc, const Vec& scale = {});

struct ControllerState {
  std::vector<double> u_prev;  // empty before the first tick
  HiddenState hidden;          // model state before the current observation
  std::vector<SensorState> history_s;  // recent (s, u) pairs for Rewarm
  std::vector<double> history_u;

  static ControllerState initial(const Checkpoint& ckpt);
};

/// (u_prev[1], ..., u_prev[N-1], u_prev[N-1]); zeros if there is no history.
std::vector<double> warm_start(const ControllerState& cs, int n_step);

struct ControlStepLog {
  std::vector<double> u_init;
  std::vector<double> u_opt;
  double initial_loss = 0.0;
  std::vector<double> gamma;  // selected per epoch
  std::vector<double> loss;   // selected per epoch
  bool fault = false;
  std::string message;
};

struct ControlOutput {
  double u = 0.0;
  ControlStepLog log;
};

/// One control tick from observation s. Updates cs (stored sequence and
/// model state) and returns the command to apply.
ControlOutput control_step(const SensorState& s, ControllerState& cs, const ControlConfig& cc,
                           const Vec& p, const Checkpoint& ckpt);

}  // namespace pbal

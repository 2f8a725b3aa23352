#pragma once

#include <Eigen/Core>

namespace pbal {

/// Ankle pitch command limits in radians.
inline constexpr double kThetaMin = -1.0;
inline constexpr double kThetaMax = 1.0;

/// Control period of the model and of every policy.
inline constexpr double kTickSeconds = 0.2;

/// One 5 Hz sensor sample s = (z, f, l).
///
/// z is the ZMP in foot-half-length units (x forward, y lateral), f the
/// muscle tensions in newtons and l the muscle lengths in millimeters.
struct SensorState {
  Eigen::Vector2d z = Eigen::Vector2d::Zero();
  Eigen::VectorXd f;
  Eigen::VectorXd l;

  static SensorState zeros(int n_muscles);

  int n_muscles() const { return static_cast<int>(f.size()); }
  int dim() const { return 2 + 2 * n_muscles(); }
  bool is_finite() const;

  /// Packs as [z_x, z_y, f..., l...].
  Eigen::VectorXd flatten() const;
  static SensorState unflatten(const Eigen::VectorXd& v, int n_muscles);
};

}  // namespace pbal

#pragma once

// Planar ankle-balance body: an inverted pendulum on a compliant foot,
// actuated by two antagonist muscles per ankle (front = dorsiflexor,
// back = plantarflexor) on mirrored left and right ankles.
//
// Sign conventions: positive pitch leans the body forward (toward +x, the
// toes). Positive z_x means the ZMP is toward the toes.

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pbal/types.hpp"

namespace pbal {

class IntegrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Hidden body parameters. Angles in degrees, everything else SI except the
/// muscle constants noted below.
struct BodyConfig {
  std::string label = "nominal";

  double spine_pitch_deg = 0.0;   // shifts the CoM by com_height * sin(theta)
  double ankle_offset_deg = 0.0;  // joint-origin calibration error

  double sole_stiffness = 5.0e4;  // N/m per contact point
  double sole_damping = 8.0e2;    // N s/m per contact point
  double foot_half_length = 0.2;  // m
  double foot_half_width = 0.08;  // m, lateral offset of each foot

  double body_mass = 40.0;     // kg
  double com_height = 0.6;     // m, above the ankle
  double gyration_radius = 0.15;  // m
  double push_height = 0.9;    // m, where disturbances act

  double moment_arm = 0.03;          // m
  double muscle_stiffness = 1.2e4;   // N/m of tendon elongation
  double muscle_damping = 1.2e3;     // N s/m
  double muscle_pretension = 150.0;  // N at zero elongation
  double muscle_rest_length = 250.0;  // mm
  double actuator_time_constant = 0.15;  // s, contractile element lag
  double passive_stiffness = 800.0;  // N m/rad, ankle structure
  double passive_damping = 2.0;      // N m s/rad
  double joint_friction = 1.0;       // N m, Coulomb

  /// Zero-mean Gaussian noise on z (foot units), f (N) and l (mm).
  double noise_z = 0.0;
  double noise_f = 0.0;
  double noise_l = 0.0;

  double spine_pitch() const;   // rad
  double ankle_offset() const;  // rad
  double inertia() const;
  /// Ankle stiffness from muscles and passive structure, N m/rad.
  double ankle_stiffness() const;
  double sole_rotational_stiffness() const;

  /// Throws ConfigError if a parameter is out of range or the open-loop
  /// body is not statically stable under theta_ref = 0.
  void validate() const;
};

inline constexpr int kMusclesPerAnkle = 2;
inline constexpr int kMuscleCount = 4;  // [L front, L back, R front, R back]

/// +1 for muscles that lengthen when the body leans forward.
double muscle_sign(int index);

struct Disturbance {
  double force = 30.0;     // N, horizontal, +x
  double start = 0.0;      // s
  double duration = 0.2;   // s
  std::optional<double> height;  // m; BodyConfig::push_height if unset

  bool active_at(double t) const { return t >= start && t < start + duration; }
  void validate() const;
};

struct PlantState {
  double time = 0.0;
  double pitch = 0.0;       // body pitch, rad
  double pitch_rate = 0.0;  // rad/s
  double foot_pitch = 0.0;  // sole rotation, rad
  double foot_pitch_rate = 0.0;
  Eigen::VectorXd contractile = Eigen::VectorXd::Zero(kMuscleCount);  // mm
  Eigen::VectorXd tension = Eigen::VectorXd::Zero(kMuscleCount);      // N
  Eigen::VectorXd muscle_length = Eigen::VectorXd::Zero(kMuscleCount);  // mm
  /// Normal force at heel-L, toe-L, heel-R, toe-R.
  Eigen::Vector4d contact = Eigen::Vector4d::Zero();
  double zmp_outside_time = 0.0;  // s the ZMP has continuously been at the edge

  double ankle_angle() const { return pitch - foot_pitch; }
  bool is_finite() const;
};

/// Positions of the four contact points relative to the ankle, m.
Eigen::Vector4d contact_x(const BodyConfig& cfg);
Eigen::Vector4d contact_y(const BodyConfig& cfg);

struct Zmp {
  double x = 0.0;  // foot half-length units
  double y = 0.0;  // foot half-width units
};

class FallenError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Force-weighted mean contact position, normalized by the foot half
/// dimensions. Throws FallenError if the total force is not positive.
Zmp zmp_from_contacts(const Eigen::Vector4d& forces, const Eigen::Vector4d& xs,
                      const Eigen::Vector4d& ys, double half_length, double half_width);

inline constexpr double kSubstep = 0.005;
inline constexpr int kSubstepsPerTick = 40;
inline constexpr double kFallAngle = 0.5;
inline constexpr double kFallZmpTime = 0.4;
/// |z_x| at or beyond this counts as outside the support interval.
inline constexpr double kSupportEdge = 0.98;

class Plant {
 public:
  explicit Plant(BodyConfig cfg, std::uint64_t noise_seed = 0);

  const BodyConfig& config() const { return cfg_; }
  const PlantState& state() const { return state_; }
  void set_state(const PlantState& s) { state_ = s; }

  /// Settled upright state for a held command: body at rest, contractile
  /// elements at their targets.
  PlantState equilibrium(double theta_ref) const;
  void reset(double theta_ref = 0.0);

  /// One 5 ms integration step.
  void substep(double theta_ref, const Disturbance* dist);
  /// One 200 ms control tick (40 substeps).
  void step(double theta_ref, const Disturbance* dist = nullptr);

  SensorState sense();
  SensorState sense_noiseless() const;
  bool is_fallen() const;

  /// Kinetic + gravitational + elastic energy, J. Used by the dissipation
  /// checks.
  double energy() const;

 private:
  double contractile_target(int i, double theta_ref) const;
  void update_muscles(double q, double q_rate);

  BodyConfig cfg_;
  PlantState state_;
  std::mt19937_64 noise_rng_;
};

SensorState sense(const PlantState& state, const BodyConfig& cfg);
bool is_fallen(const PlantState& state, const BodyConfig& cfg);
PlantState plant_step(const PlantState& state, double theta_ref, const BodyConfig& cfg,
                      const Disturbance* active);

}  // namespace pbal

#include "pbal/plant.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

namespace pbal {

namespace {

constexpr double kGravity = 9.81;
constexpr double kFrictionVelocity = 0.01;  // rad/s, width of the Coulomb smoothing

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

struct MuscleForces {
  Eigen::VectorXd tension = Eigen::VectorXd::Zero(kMuscleCount);
  Eigen::VectorXd length = Eigen::VectorXd::Zero(kMuscleCount);
  double torque = 0.0;  // on the body, N m
};

MuscleForces muscle_forces(const BodyConfig& cfg, const Eigen::VectorXd& contractile, double q,
                           double q_rate) {
  MuscleForces m;
  const double arm_mm = cfg.moment_arm * 1000.0;
  for (int i = 0; i < kMuscleCount; ++i) {
    const double sgn = muscle_sign(i);
    m.length[i] = cfg.muscle_rest_length + sgn * arm_mm * q;
    const double stretch = (m.length[i] - contractile[i]) * 1e-3;
    const double rate = sgn * cfg.moment_arm * q_rate;
    m.tension[i] = std::max(
        0.0, cfg.muscle_pretension + cfg.muscle_stiffness * stretch + cfg.muscle_damping * rate);
    m.torque -= sgn * cfg.moment_arm * m.tension[i];
  }
  return m;
}

/// Ankle torque on the body from muscles, passive structure and friction.
double ankle_torque(const BodyConfig& cfg, const MuscleForces& m, double q, double q_rate) {
  return m.torque - cfg.passive_stiffness * q - cfg.passive_damping * q_rate -
         cfg.joint_friction * std::tanh(q_rate / kFrictionVelocity);
}

/// Contact forces (heel-L, toe-L, heel-R, toe-R) for a given sole rotation.
Eigen::Vector4d contact_forces(const BodyConfig& cfg, double psi, double psi_rate) {
  const double weight = cfg.body_mass * kGravity;
  const double L = cfg.foot_half_length;
  const double a = cfg.sole_stiffness * L * psi + cfg.sole_damping * L * psi_rate;
  const double toe = std::clamp(weight / 4.0 + a, 0.0, weight / 2.0);
  const double heel = weight / 2.0 - toe;
  return {heel, toe, heel, toe};
}

}  // namespace

double BodyConfig::spine_pitch() const { return deg2rad(spine_pitch_deg); }
double BodyConfig::ankle_offset() const { return deg2rad(ankle_offset_deg); }

double BodyConfig::inertia() const {
  return body_mass * (com_height * com_height + gyration_radius * gyration_radius);
}

double BodyConfig::ankle_stiffness() const {
  return kMuscleCount * muscle_stiffness * moment_arm * moment_arm + passive_stiffness;
}

double BodyConfig::sole_rotational_stiffness() const {
  return 4.0 * sole_stiffness * foot_half_length * foot_half_length;
}

void BodyConfig::validate() const {
  auto positive = [&](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v))
      throw ConfigError(fmt::format("body config '{}': {} must be positive (got {})", label, name, v));
  };
  auto non_negative = [&](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ConfigError(fmt::format("body config '{}': {} must be non-negative (got {})", label, name, v));
  };
  if (label.empty()) throw ConfigError("body config label must not be empty");
  positive(sole_stiffness, "sole_stiffness");
  positive(sole_damping, "sole_damping");
  positive(foot_half_length, "foot_half_length");
  positive(foot_half_width, "foot_half_width");
  positive(body_mass, "body_mass");
  positive(com_height, "com_height");
  non_negative(gyration_radius, "gyration_radius");
  positive(push_height, "push_height");
  positive(moment_arm, "moment_arm");
  positive(muscle_stiffness, "muscle_stiffness");
  non_negative(muscle_damping, "muscle_damping");
  non_negative(muscle_pretension, "muscle_pretension");
  positive(muscle_rest_length, "muscle_rest_length");
  positive(actuator_time_constant, "actuator_time_constant");
  non_negative(passive_stiffness, "passive_stiffness");
  non_negative(passive_damping, "passive_damping");
  non_negative(joint_friction, "joint_friction");
  non_negative(noise_z, "noise_z");
  non_negative(noise_f, "noise_f");
  non_negative(noise_l, "noise_l");
  if (std::abs(spine_pitch_deg) > 15.0 || std::abs(ankle_offset_deg) > 15.0)
    throw ConfigError(fmt::format("body config '{}': |spine_pitch_deg|, |ankle_offset_deg| must be <= 15", label));

  // Open-loop stability under theta_ref = 0: the ankle in series with the
  // sole must out-stiffen gravity, and the settled ZMP must sit well inside
  // the foot.
  const double ka = ankle_stiffness();
  const double ks = sole_rotational_stiffness();
  const double series = ka * ks / (ka + ks);
  const double gravity = body_mass * kGravity * com_height;
  if (series < 1.1 * gravity)
    throw ConfigError(fmt::format(
        "body config '{}': open-loop body is unstable (ankle+sole stiffness {:.1f} N m/rad vs "
        "gravity {:.1f} N m/rad)",
        label, series, gravity));
  Plant probe(*this);
  const auto s = probe.sense_noiseless();
  if (std::abs(s.z.x()) > 0.8)
    throw ConfigError(fmt::format("body config '{}': settled ZMP {:.3f} too close to the foot edge",
                                  label, s.z.x()));
}

double muscle_sign(int index) { return index % 2 == 0 ? -1.0 : 1.0; }

void Disturbance::validate() const {
  if (!(duration > 0.0)) throw ConfigError("disturbance duration must be positive");
  if (!std::isfinite(force) || !std::isfinite(start)) throw ConfigError("disturbance must be finite");
  if (height && !(*height > 0.0)) throw ConfigError("disturbance height must be positive");
}

bool PlantState::is_finite() const {
  return std::isfinite(time) && std::isfinite(pitch) && std::isfinite(pitch_rate) &&
         std::isfinite(foot_pitch) && std::isfinite(foot_pitch_rate) && contractile.allFinite() &&
         tension.allFinite() && muscle_length.allFinite() && contact.allFinite();
}

Eigen::Vector4d contact_x(const BodyConfig& cfg) {
  const double L = cfg.foot_half_length;
  return {-L, L, -L, L};
}

Eigen::Vector4d contact_y(const BodyConfig& cfg) {
  const double W = cfg.foot_half_width;
  return {W, W, -W, -W};
}

Zmp zmp_from_contacts(const Eigen::Vector4d& forces, const Eigen::Vector4d& xs,
                      const Eigen::Vector4d& ys, double half_length, double half_width) {
  const double total = forces.sum();
  if (!(total > 0.0)) throw FallenError("no contact force: the body is airborne or fallen");
  // Force-weighted mean of points inside the sole; clamp only absorbs rounding.
  return {std::clamp(forces.dot(xs) / total / half_length, -1.0, 1.0),
          std::clamp(forces.dot(ys) / total / half_width, -1.0, 1.0)};
}

Plant::Plant(BodyConfig cfg, std::uint64_t noise_seed) : cfg_(std::move(cfg)), noise_rng_(noise_seed) {
  reset(0.0);
}

double Plant::contractile_target(int i, double theta_ref) const {
  return cfg_.muscle_rest_length +
         muscle_sign(i) * cfg_.moment_arm * 1000.0 * (theta_ref + cfg_.ankle_offset());
}

PlantState Plant::equilibrium(double theta_ref) const {
  PlantState s;
  for (int i = 0; i < kMuscleCount; ++i) s.contractile[i] = contractile_target(i, theta_ref);

  const double weight = cfg_.body_mass * kGravity;
  const double offset = cfg_.com_height * std::sin(cfg_.spine_pitch());
  const double ks = cfg_.sole_rotational_stiffness();

  // For a body pitch, settle the sole rotation by fixed-point iteration and
  // return the residual torque on the body.
  auto settle = [&](double pitch, double& psi) {
    psi = 0.0;
    double tau = 0.0;
    for (int it = 0; it < 200; ++it) {
      const double q = pitch - psi;
      const auto m = muscle_forces(cfg_, s.contractile, q, 0.0);
      tau = m.torque - cfg_.passive_stiffness * q;
      const double next = -tau / ks;
      if (std::abs(next - psi) < 1e-15) {
        psi = next;
        break;
      }
      psi = next;
    }
    return weight * (cfg_.com_height * std::sin(pitch) + offset) + tau;
  };

  double lo = -kFallAngle, hi = kFallAngle, psi = 0.0;
  double r_lo = settle(lo, psi);
  for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double r = settle(mid, psi);
    if ((r > 0.0) == (r_lo > 0.0)) {
      lo = mid;
      r_lo = r;
    } else {
      hi = mid;
    }
  }
  s.pitch = 0.5 * (lo + hi);
  settle(s.pitch, psi);
  s.foot_pitch = psi;
  const auto m = muscle_forces(cfg_, s.contractile, s.ankle_angle(), 0.0);
  s.tension = m.tension;
  s.muscle_length = m.length;
  s.contact = contact_forces(cfg_, psi, 0.0);
  return s;
}

void Plant::reset(double theta_ref) { state_ = equilibrium(theta_ref); }

void Plant::update_muscles(double q, double q_rate) {
  const auto m = muscle_forces(cfg_, state_.contractile, q, q_rate);
  state_.tension = m.tension;
  state_.muscle_length = m.length;
}

void Plant::substep(double theta_ref, const Disturbance* dist) {
  auto& s = state_;
  const double dt = kSubstep;

  // Contractile elements relax exponentially toward their targets.
  const double decay = std::exp(-dt / cfg_.actuator_time_constant);
  for (int i = 0; i < kMuscleCount; ++i) {
    const double target = contractile_target(i, theta_ref);
    s.contractile[i] = target + (s.contractile[i] - target) * decay;
  }

  const double q = s.ankle_angle();
  const double q_rate = s.pitch_rate - s.foot_pitch_rate;
  const auto m = muscle_forces(cfg_, s.contractile, q, q_rate);
  const double tau_ankle = ankle_torque(cfg_, m, q, q_rate);

  const double weight = cfg_.body_mass * kGravity;
  double tau = weight * cfg_.com_height * (std::sin(s.pitch) + std::sin(cfg_.spine_pitch())) +
               tau_ankle;
  if (dist != nullptr && dist->active_at(s.time))
    tau += dist->force * dist->height.value_or(cfg_.push_height) * std::cos(s.pitch);

  s.pitch_rate += dt * tau / cfg_.inertia();
  s.pitch += dt * s.pitch_rate;

  // Quasi-static foot on a visco-elastic sole: the sole moment balances the
  // reaction of the ankle torque.
  const double L = cfg_.foot_half_length;
  const double K = cfg_.sole_rotational_stiffness();
  const double C = 4.0 * cfg_.sole_damping * L * L;
  const double psi = (C * s.foot_pitch - dt * tau_ankle) / (C + dt * K);
  s.foot_pitch_rate = (psi - s.foot_pitch) / dt;
  s.foot_pitch = psi;
  s.contact = contact_forces(cfg_, s.foot_pitch, s.foot_pitch_rate);

  s.time += dt;
  update_muscles(s.ankle_angle(), s.pitch_rate - s.foot_pitch_rate);

  if (!s.is_finite())
    throw IntegrationError(fmt::format("plant integration produced NaN at t={:.3f}s", s.time));

  const auto z = zmp_from_contacts(s.contact, contact_x(cfg_), contact_y(cfg_),
                                   cfg_.foot_half_length, cfg_.foot_half_width);
  s.zmp_outside_time = std::abs(z.x) >= kSupportEdge ? s.zmp_outside_time + dt : 0.0;
}

void Plant::step(double theta_ref, const Disturbance* dist) {
  if (!state_.is_finite()) throw IntegrationError("plant state contains NaN");
  for (int k = 0; k < kSubstepsPerTick; ++k) substep(theta_ref, dist);
}

SensorState Plant::sense_noiseless() const { return pbal::sense(state_, cfg_); }

SensorState Plant::sense() {
  SensorState s = sense_noiseless();
  auto add = [&](double sigma, auto&& v) {
    if (sigma <= 0.0) return;
    std::normal_distribution<double> n(0.0, sigma);
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] += n(noise_rng_);
  };
  add(cfg_.noise_z, s.z);
  add(cfg_.noise_f, s.f);
  add(cfg_.noise_l, s.l);
  return s;
}

bool Plant::is_fallen() const { return pbal::is_fallen(state_, cfg_); }

double Plant::energy() const {
  const auto& s = state_;
  const double weight = cfg_.body_mass * kGravity;
  double e = 0.5 * cfg_.inertia() * s.pitch_rate * s.pitch_rate;
  e += weight * cfg_.com_height * (std::cos(s.pitch) - std::sin(cfg_.spine_pitch()) * s.pitch);
  const double q = s.ankle_angle();
  const double k = cfg_.muscle_stiffness;
  const double t0 = cfg_.muscle_pretension;
  for (int i = 0; i < kMuscleCount; ++i) {
    const double x = (s.muscle_length[i] - s.contractile[i]) * 1e-3;
    // Integral of max(0, t0 + k x) dx from 0.
    const double slack = -t0 / k;
    e += x > slack ? t0 * x + 0.5 * k * x * x : t0 * slack + 0.5 * k * slack * slack;
  }
  e += 0.5 * cfg_.passive_stiffness * q * q;
  e += 0.5 * cfg_.sole_rotational_stiffness() * s.foot_pitch * s.foot_pitch;
  return e;
}

SensorState sense(const PlantState& state, const BodyConfig& cfg) {
  const auto z = zmp_from_contacts(state.contact, contact_x(cfg), contact_y(cfg),
                                   cfg.foot_half_length, cfg.foot_half_width);
  SensorState s;
  s.z = {z.x, z.y};
  s.f = state.tension;
  s.l = state.muscle_length;
  return s;
}

bool is_fallen(const PlantState& state, const BodyConfig&) {
  return std::abs(state.ankle_angle()) > kFallAngle || state.zmp_outside_time > kFallZmpTime;
}

PlantState plant_step(const PlantState& state, double theta_ref, const BodyConfig& cfg,
                      const Disturbance* active) {
  Plant p(cfg);
  p.set_state(state);
  p.step(theta_ref, active);
  return p.state();
}

}  // namespace pbal

#include <doctest.h>

#include <cmath>

#include "pbal/plant.hpp"
#include "support.hpp"

using namespace pbal;
using pbal::test::Gen;

namespace {

constexpr double kG = 9.81;

// Rigid-foot static balance: gravity torque equals the linear ankle spring
// pulling toward the commanded angle. Solved by Newton on the pitch.
double rigid_pitch(const BodyConfig& c, double theta_ref) {
  const double g = c.body_mass * kG * c.com_height;
  const double ka = c.ankle_stiffness();
  const double km = ka - c.passive_stiffness;
  double th = 0.0;
  for (int i = 0; i < 60; ++i) {
    const double r = g * (std::sin(th) + std::sin(c.spine_pitch())) -
                     km * (th - theta_ref - c.ankle_offset()) - c.passive_stiffness * th;
    th -= r / (g * std::cos(th) - ka);
  }
  return th;
}

double rigid_zmp(const BodyConfig& c, double theta_ref) {
  const double th = rigid_pitch(c, theta_ref);
  return c.com_height * (std::sin(th) + std::sin(c.spine_pitch())) / c.foot_half_length;
}

}  // namespace

TEST_CASE("zmp from contact forces") {
  const Eigen::Vector4d ys = Eigen::Vector4d::Zero();
  CHECK(zmp_from_contacts({0, 12, 0, 0}, {-1, 0, 1, 1}, ys, 1.0, 1.0).x == 0.0);
  CHECK(zmp_from_contacts({5, 5, 0, 0}, {-0.2, 0.2, 0, 0}, ys, 0.2, 1.0).x == 0.0);
  CHECK(zmp_from_contacts({30, 10, 0, 0}, {-0.2, 0.2, 0, 0}, ys, 0.2, 1.0).x ==
        doctest::Approx(-0.5).epsilon(1e-14));
  CHECK_THROWS_AS(zmp_from_contacts(Eigen::Vector4d::Zero(), {-1, 1, -1, 1}, ys, 1.0, 1.0),
                  FallenError);
}

TEST_CASE("symmetric body holds its posture") {
  BodyConfig c;
  Plant p(c);
  for (int t = 0; t < 50; ++t) {
    p.step(0.0);
    CHECK(std::abs(p.state().ankle_angle()) <= 1e-3);
  }
  CHECK_FALSE(p.is_fallen());
}

TEST_CASE("ankle offset shifts the settled ZMP as static balance predicts") {
  BodyConfig c;
  c.ankle_offset_deg = 5.0;
  Plant p(c);
  for (int t = 0; t < 50; ++t) p.step(0.0);
  const double z = p.sense_noiseless().z.x();
  const double oracle = rigid_zmp(c, 0.0);
  CHECK(oracle > 0.0);
  CHECK(z > 0.0);
  CHECK(z == doctest::Approx(oracle).epsilon(0.1));

  c.ankle_offset_deg = -5.0;
  Plant q(c);
  for (int t = 0; t < 50; ++t) q.step(0.0);
  CHECK(q.sense_noiseless().z.x() < 0.0);
}

TEST_CASE("stiff sole approaches the rigid-foot ZMP") {
  for (double sp : {0.0, 5.0})
    for (double ao : {-5.0, 5.0})
      for (double ref : {0.0, 0.3}) {
        BodyConfig c;
        c.spine_pitch_deg = sp;
        c.ankle_offset_deg = ao;
        c.sole_stiffness = 5.0e7;
        const Plant p(c);
        const double z = sense(p.equilibrium(ref), c).z.x();
        const double oracle = rigid_zmp(c, ref);
        CHECK(std::abs(z - oracle) <= 0.05 * std::abs(oracle));
      }
}

TEST_CASE("push response peaks and decays with the command held") {
  BodyConfig c;
  Plant p(c);
  Disturbance push;
  push.start = p.state().time;
  double peak = 0.0;
  for (int t = 0; t < 10; ++t) {
    p.step(0.0, &push);
    peak = std::max(peak, std::abs(p.sense_noiseless().z.x()));
  }
  CHECK(peak > 0.1);
  for (int t = 0; t < 40; ++t) p.step(0.0, &push);
  CHECK(std::abs(p.sense_noiseless().z.x()) < 0.1 * peak);
  CHECK_FALSE(p.is_fallen());
}

TEST_CASE("fall detection") {
  BodyConfig c;
  const Plant p(c);
  PlantState s = p.equilibrium(0.0);
  CHECK_FALSE(is_fallen(s, c));

  PlantState tilted = s;
  tilted.pitch = 0.6;
  tilted.foot_pitch = 0.0;
  CHECK(is_fallen(tilted, c));

  // ZMP at the edge for 0.2 s, then back inside: the timer resets.
  PlantState edge = s;
  edge.zmp_outside_time = 0.2;
  CHECK_FALSE(is_fallen(edge, c));
  Plant q(c);
  q.set_state(edge);
  q.substep(0.0, nullptr);
  CHECK(q.state().zmp_outside_time == 0.0);
  CHECK_FALSE(q.is_fallen());

  edge.zmp_outside_time = 0.41;
  CHECK(is_fallen(edge, c));
}

TEST_CASE("ZMP stays in the support interval and forces stay non-negative") {
  Gen g(21);
  for (int run = 0; run < 10; ++run) {
    BodyConfig c;
    c.spine_pitch_deg = g.real(-5, 5);
    c.ankle_offset_deg = g.real(-5, 5);
    Plant p(c);
    Disturbance push;
    push.force = g.real(-40, 40);
    push.start = g.real(0, 4);
    for (int t = 0; t < 60 && !p.is_fallen(); ++t) {
      p.step(g.real(-1, 1), &push);
      const auto& st = p.state();
      CHECK((st.contact.array() >= 0.0).all());
      CHECK((st.tension.array() >= 0.0).all());
      if (st.contact.sum() > 0.0) {
        const double z = p.sense_noiseless().z.x();
        CHECK(z >= -1.0);
        CHECK(z <= 1.0);
      }
    }
  }
}

TEST_CASE("energy does not increase with a constant command and no push") {
  Gen g(22);
  for (int run = 0; run < 8; ++run) {
    BodyConfig c;
    c.spine_pitch_deg = g.real(-5, 5);
    c.ankle_offset_deg = g.real(-5, 5);
    Plant p(c);
    PlantState s = p.state();
    s.pitch_rate = g.real(-0.3, 0.3);
    p.set_state(s);
    const double ref = g.real(-0.2, 0.2);
    // Let the actuators reach the held command before measuring.
    PlantState settled = p.equilibrium(ref);
    settled.pitch_rate = s.pitch_rate;
    p.set_state(settled);
    double prev = p.energy();
    int rises = 0;
    for (int k = 0; k < 2000; ++k) {  // 10 s of substeps
      p.substep(ref, nullptr);
      const double e = p.energy();
      if (e > prev + 1e-9 * std::abs(prev)) ++rises;
      prev = e;
    }
    CHECK(rises == 0);
  }
}

TEST_CASE("identical seeds give identical trajectories") {
  BodyConfig c;
  c.noise_z = 0.01;
  c.noise_f = 0.5;
  c.noise_l = 0.02;
  Plant a(c, 77), b(c, 77);
  Disturbance push;
  for (int t = 0; t < 30; ++t) {
    const double u = 0.3 * std::sin(0.4 * t);
    a.step(u, &push);
    b.step(u, &push);
    CHECK(a.sense().flatten() == b.sense().flatten());
  }
  CHECK(a.state().pitch == b.state().pitch);
}

TEST_CASE("body config validation") {
  BodyConfig c;
  CHECK_NOTHROW(c.validate());
  c.spine_pitch_deg = 16.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = BodyConfig{};
  c.muscle_stiffness = 10.0;
  c.passive_stiffness = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = BodyConfig{};
  c.body_mass = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  Disturbance d;
  d.duration = 0.0;
  CHECK_THROWS_AS(d.validate(), ConfigError);
}

TEST_CASE("non-finite state is an integration failure") {
  BodyConfig c;
  Plant p(c);
  PlantState s = p.state();
  s.pitch = std::nan("");
  p.set_state(s);
  CHECK_THROWS_AS(p.step(0.0), IntegrationError);
}

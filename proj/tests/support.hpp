#pragma once

// Shared helpers for the unit tests: seeded generators and a central
// finite-difference oracle.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>

#include <Eigen/Core>

#include "pbal/collect.hpp"
#include "pbal/dpmpb.hpp"

namespace pbal::test {

struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  double real(double a, double b) { return uniform(rng, a, b); }
  int integer(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
  }
  Eigen::MatrixXd mat(Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = real(-scale, scale);
    return m;
  }
  Eigen::VectorXd vec(Eigen::Index n, double scale = 1.0) { return mat(n, 1, scale); }
};

/// Central difference of f with respect to x[i], step h.
inline double central_diff(const std::function<double()>& f, double& x, double h = 1e-5) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

/// True if analytic matches numeric within rel (or abs near zero).
inline bool grad_close(double analytic, double numeric, double rel = 1e-4, double abs = 1e-7) {
  const double diff = std::abs(analytic - numeric);
  if (diff <= abs) return true;
  return diff <= rel * std::max(std::abs(analytic), std::abs(numeric));
}

/// A small architecture for gradient and property tests.
inline Architecture tiny_arch(Gen& g, int n_muscles = 1) {
  Architecture a;
  a.n_muscles = n_muscles;
  a.n_p = g.integer(1, 3);
  for (auto& h : a.hidden) h = g.integer(2, 6);
  return a;
}

inline Checkpoint tiny_checkpoint(Gen& g, int n_muscles = 1, double weight_scale = 1.0) {
  Checkpoint c;
  c.arch = tiny_arch(g, n_muscles);
  c.net = Network::random(c.arch, g.rng());
  if (weight_scale != 1.0) c.net.visit([&](const std::string&, std::span<double> s) {
    for (double& v : s) v *= weight_scale;
  });
  c.norm.s_mean = g.vec(c.arch.n_s());
  c.norm.s_std = (g.vec(c.arch.n_s()).array().abs() + 0.5).matrix();
  c.norm.u_mean = g.vec(1, 0.1);
  c.norm.u_std = Eigen::VectorXd::Constant(1, g.real(0.3, 1.0));
  c.pbs.push_back({"a", g.vec(c.arch.n_p, 0.5)});
  c.pbs.push_back({"b", g.vec(c.arch.n_p, 0.5)});
  return c;
}

inline SensorState random_state(Gen& g, const Checkpoint& c) {
  return SensorState::unflatten(
      c.norm.s_mean + c.norm.s_std.cwiseProduct(g.vec(c.arch.n_s())), c.arch.n_muscles);
}

}  // namespace pbal::test

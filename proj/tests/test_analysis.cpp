#include <doctest.h>

#include <cmath>

#include "pbal/analysis.hpp"
#include "support.hpp"

using namespace pbal;
using pbal::test::Gen;

namespace {

TrialRecord trial_from_zx(const std::vector<double>& zx, int n_m = 4) {
  TrialRecord r;
  r.condition = "test";
  for (std::size_t t = 0; t < zx.size(); ++t) {
    SensorState s;
    s.z = Eigen::Vector2d(zx[t], 0.0);
    s.f = Vec::Zero(n_m);
    s.l = Vec::Zero(n_m);
    r.states.push_back(s);
    r.commands.push_back(0.0);
    r.t.push_back(0.2 * static_cast<double>(t));
  }
  return r;
}

}  // namespace

TEST_CASE("E_z examples") {
  std::vector<TrialRecord> flat{trial_from_zx(std::vector<double>(30, 0.0))};
  CHECK(metric_Ez(flat) == 0.0);

  std::vector<double> zx(30, 0.0);
  zx[1] = 1.0;
  zx[2] = -2.0;
  std::vector<TrialRecord> one{trial_from_zx(zx)};
  CHECK(metric_Ez(one) == doctest::Approx(3.0));

  // Averaged over trials.
  one.push_back(trial_from_zx(std::vector<double>(30, 0.0)));
  CHECK(metric_Ez(one) == doctest::Approx(1.5));
}

TEST_CASE("E_z ignores a constant offset") {
  Gen g(21);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> zx(30);
    for (auto& v : zx) v = g.real(-1, 1);
    const double c = g.real(-5, 5);
    std::vector<double> shifted = zx;
    for (auto& v : shifted) v += c;
    std::vector<TrialRecord> a{trial_from_zx(zx)}, b{trial_from_zx(shifted)};
    CHECK(metric_Ez(a) == doctest::Approx(metric_Ez(b)).epsilon(1e-12));
  }
}

TEST_CASE("E_z input errors") {
  std::vector<TrialRecord> none;
  CHECK_THROWS_AS(metric_Ez(none), std::invalid_argument);
  std::vector<TrialRecord> short_trial{trial_from_zx(std::vector<double>(29, 0.0))};
  CHECK_THROWS_AS(metric_Ez(short_trial), std::invalid_argument);
}

TEST_CASE("E_f examples") {
  auto r = trial_from_zx(std::vector<double>(30, 0.0), 1);
  CHECK(metric_Ef(r) == 0.0);
  for (std::size_t t = 0; t < r.size(); ++t) r.states[t].f[0] = t % 2 ? 1.0 : 0.0;
  CHECK(metric_Ef(r) == doctest::Approx(1.0));
  CHECK(delta_f_norms(r).size() == 29);

  auto two = trial_from_zx(std::vector<double>(3, 0.0), 2);
  two.states[1].f << 3.0, 4.0;
  two.states[2].f << 3.0, 4.0;
  CHECK(metric_Ef(two) == doctest::Approx(std::sqrt(25.0 / 2.0)));
  CHECK_THROWS_AS(metric_Ef(trial_from_zx({0.0})), std::invalid_argument);
}

TEST_CASE("RMS of command changes") {
  auto r = trial_from_zx(std::vector<double>(5, 0.0));
  r.commands = {0.0, 1.0, 1.0, 0.0, 0.0};
  CHECK(rms_delta_u(r) == doctest::Approx(std::sqrt(0.5)));
}

TEST_CASE("overshoot") {
  std::vector<double> z{0.0, 1.0, 2.0, 0.5, -0.4, -0.8, 0.1, 0.0};
  auto o = overshoot(z);
  CHECK(o.first_peak == 2.0);
  CHECK(o.second_peak == 0.8);
  CHECK(o.ratio == doctest::Approx(0.4));

  std::vector<double> neg{0.0, -2.0, -1.0, 0.5};
  o = overshoot(neg);
  CHECK(o.first_peak == -2.0);
  CHECK(o.ratio == doctest::Approx(0.25));

  std::vector<double> mono{0.0, 1.0, 0.5, 0.1};
  CHECK(overshoot(mono).ratio == 0.0);
  std::vector<double> zeros(5, 0.0);
  CHECK(overshoot(zeros).ratio == 0.0);
}

TEST_CASE("mean_zx averages offset-removed series") {
  std::vector<TrialRecord> t{trial_from_zx({1.0, 2.0, 3.0}), trial_from_zx({0.0, -1.0, 0.0})};
  CHECK(mean_zx(t) == (std::vector<double>{0.0, 0.0, 1.0}));
  t.push_back(trial_from_zx({0.0}));
  CHECK_THROWS_AS(mean_zx(t), std::invalid_argument);
}

TEST_CASE("symmetric eigen decomposition") {
  Gen g(22);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = g.integer(2, 6);
    Mat a = g.mat(n, n);
    a = (a + a.transpose()).eval();
    Vec values;
    Mat vectors;
    symmetric_eigen(a, values, vectors);
    for (Eigen::Index k = 1; k < n; ++k) CHECK(values[k] <= values[k - 1]);
    CHECK((vectors.transpose() * vectors - Mat::Identity(n, n)).norm() < 1e-10);
    CHECK((vectors * values.asDiagonal() * vectors.transpose() - a).norm() < 1e-10);
  }
}

TEST_CASE("PCA of collinear points has a zero second coordinate") {
  std::vector<PbEntry> pbs;
  for (int i = 0; i < 5; ++i) pbs.push_back({std::to_string(i), Vec(Eigen::Vector2d(i, 2.0 * i))});
  const auto proj = pca_project(pbs);
  for (Eigen::Index i = 0; i < 5; ++i) CHECK(std::abs(proj.coords(i, 1)) < 1e-12);
  CHECK(proj.coords(4, 0) - proj.coords(0, 0) == doctest::Approx(std::sqrt(80.0)));
}

TEST_CASE("PCA preserves pairwise distances of planar sets") {
  Gen g(23);
  for (int trial = 0; trial < 50; ++trial) {
    const int d = trial % 2 ? 2 : 3;
    const int n = d == 2 ? g.integer(2, 9) : 3;  // any set in 2-D, a triangle in 3-D
    std::vector<PbEntry> pbs;
    for (int i = 0; i < n; ++i) pbs.push_back({std::to_string(i), g.vec(d)});
    const auto proj = pca_project(pbs);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        CHECK((proj.coords.row(i) - proj.coords.row(j)).norm() ==
              doctest::Approx((pbs[i].p - pbs[j].p).norm()).epsilon(1e-9));
  }
}

TEST_CASE("PCA sign convention and degenerate input") {
  Gen g(24);
  std::vector<PbEntry> pbs;
  for (int i = 0; i < 6; ++i) pbs.push_back({std::to_string(i), g.vec(3)});
  const auto proj = pca_project(pbs);
  for (Eigen::Index c = 0; c < proj.components.cols(); ++c) {
    Eigen::Index arg;
    proj.components.col(c).cwiseAbs().maxCoeff(&arg);
    CHECK(proj.components(arg, c) > 0.0);
    CHECK(proj.components.col(c).norm() == doctest::Approx(1.0));
  }
  CHECK(proj.variance[0] >= proj.variance[1]);

  std::vector<PbEntry> same(4, PbEntry{"x", Vec::Constant(2, 0.3)});
  const auto zero = pca_project(same);
  CHECK(zero.coords.isZero());

  CHECK_THROWS_AS(pca_project(std::span(pbs).first(1)), std::invalid_argument);
}

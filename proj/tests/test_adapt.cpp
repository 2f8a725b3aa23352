#include <doctest.h>

#include <limits>

#include "pbal/adapt.hpp"
#include "support.hpp"

using namespace pbal;
using pbal::test::Gen;

namespace {

struct Stream {
  std::vector<SensorState> s;
  std::vector<double> u;
};

// Sequence produced by the model itself from a zero hidden state.
Stream self_generated(const Checkpoint& c, const Vec& p, int n, Gen& g) {
  Stream out;
  HiddenState h = HiddenState::zeros(c.arch);
  SensorState s = test::random_state(g, c);
  for (int t = 0; t < n; ++t) {
    const double u = g.real(-1, 1);
    out.s.push_back(s);
    out.u.push_back(u);
    auto r = predict_step(c, s, u, p, h);
    s = r.next;
    h = r.hidden;
  }
  return out;
}

}  // namespace

TEST_CASE("FIFO buffer and update trigger") {
  Gen g(1);
  const Checkpoint c = test::tiny_checkpoint(g);
  PbAdapter a(c, Vec::Zero(c.arch.n_p), AdaptConfig::from_checkpoint(c));
  std::vector<SensorState> seen;
  for (int i = 0; i < 49; ++i) {
    seen.push_back(test::random_state(g, c));
    CHECK_FALSE(a.observe(seen.back(), 0.0));
  }
  CHECK(a.updates() == 0);
  CHECK_THROWS_AS(a.update_pb(), std::logic_error);
  seen.push_back(test::random_state(g, c));
  CHECK(a.observe(seen.back(), 0.0));
  CHECK(a.updates() == 1);
  seen.push_back(test::random_state(g, c));
  a.observe(seen.back(), 0.5);
  CHECK(a.buffer_size() == 50);
  CHECK(a.buffer_states().front().flatten() == seen[1].flatten());
  CHECK(a.buffer_states().back().flatten() == seen[50].flatten());
  CHECK(a.buffer_commands().back() == 0.5);
  CHECK(a.log().size() == 2);
}

TEST_CASE("buffer length saturates at capacity over a long stream") {
  Gen g(2);
  Checkpoint c = test::tiny_checkpoint(g);
  for (auto& h : c.arch.hidden) h = 2;
  c.net = Network::random(c.arch, 5);
  PbAdapter a(c, Vec::Zero(c.arch.n_p), AdaptConfig{});
  const SensorState s = test::random_state(g, c);
  for (int i = 0; i < 10000; ++i) a.observe(s, 0.0);
  CHECK(a.buffer_size() == 50);
  CHECK(a.updates() == 10000 - 49);
}

TEST_CASE("adaptation leaves the weights untouched") {
  Gen g(3);
  const Checkpoint c = test::tiny_checkpoint(g);
  const Network before = c.net;
  PbAdapter a(c, Vec::Zero(c.arch.n_p), AdaptConfig{});
  for (int i = 0; i < 70; ++i) a.observe(test::random_state(g, c), g.real(-1, 1));
  CHECK(a.updates() == 21);
  CHECK(c.net == before);
  CHECK(a.p() != Vec::Zero(c.arch.n_p));
}

TEST_CASE("self-generated data at the generating PB is a stationary point") {
  Gen g(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Checkpoint c = test::tiny_checkpoint(g);
    const Vec p_star = c.pbs[1].p;
    const auto stream = self_generated(c, p_star, 50, g);
    PbAdapter a(c, p_star, AdaptConfig{});
    for (int t = 0; t < 50; ++t) a.observe(stream.s[t], stream.u[t]);
    REQUIRE(a.updates() == 1);
    CHECK((a.p() - p_star).norm() <= 1e-6);
    CHECK(a.log().back().loss <= 1e-20);
  }
}

TEST_CASE("adaptation pulls p toward the generating PB") {
  Gen g(5);
  const Checkpoint c = test::tiny_checkpoint(g);
  const Vec p_star = c.pbs[1].p;
  const auto stream = self_generated(c, p_star, 50, g);
  AdaptConfig cfg;
  cfg.lr = 0.05;
  PbAdapter a(c, c.pbs[0].p, cfg);
  for (int t = 0; t < 50; ++t) a.observe(stream.s[t], stream.u[t]);
  const double start = a.buffer_loss();
  for (int k = 0; k < 100; ++k) a.update_pb();
  CHECK(a.buffer_loss() < start);
}

TEST_CASE("adaptation is deterministic") {
  Gen g(6);
  const Checkpoint c = test::tiny_checkpoint(g);
  const auto stream = self_generated(c, c.pbs[0].p, 80, g);
  PbAdapter a(c, Vec::Zero(c.arch.n_p), AdaptConfig{}), b(c, Vec::Zero(c.arch.n_p), AdaptConfig{});
  for (int t = 0; t < 80; ++t) {
    a.observe(stream.s[t], stream.u[t]);
    b.observe(stream.s[t], stream.u[t]);
  }
  CHECK(a.p() == b.p());
}

TEST_CASE("non-finite gradients skip the update") {
  Gen g(7);
  Checkpoint c = test::tiny_checkpoint(g);
  c.net.decoder[3].W *= std::numeric_limits<double>::max();
  PbAdapter a(c, Vec::Zero(c.arch.n_p), AdaptConfig{});
  for (int i = 0; i < 50; ++i) a.observe(test::random_state(g, c), 0.1);
  REQUIRE(a.log().size() == 1);
  CHECK(a.log().back().skipped);
  CHECK(a.updates() == 0);
  CHECK(a.p() == Vec::Zero(c.arch.n_p));
}

TEST_CASE("adapt config validation") {
  AdaptConfig c;
  CHECK_NOTHROW(c.validate());
  c.threshold = 60;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AdaptConfig{};
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  Gen g(8);
  const Checkpoint ck = test::tiny_checkpoint(g);
  CHECK_THROWS_AS(PbAdapter(ck, Vec::Zero(ck.arch.n_p + 1), AdaptConfig{}), nn::DimensionError);
}

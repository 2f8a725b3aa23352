#include <doctest.h>

#include <fstream>
#include <set>

#include "pbal/experiment.hpp"

using namespace pbal;

namespace {

const char* kGrid = R"(
[experiment]
name = t
seed = 7
[grid]
spine_pitch_deg = -5, 0, 5
ankle_offset_deg = 0, 5
[control]
conditions = proposed, none, pd1, soft
[variant.soft]
c_u = 10
pb = sp-5_ao+0
)";

}  // namespace

TEST_CASE("grid expands into labelled bodies") {
  const auto cfg = ExperimentConfig::parse(kGrid);
  REQUIRE(cfg.bodies.size() == 6);
  CHECK(cfg.bodies.front().label == "sp-5_ao+0");
  CHECK(cfg.bodies.back().label == "sp+5_ao+5");
  CHECK(cfg.control_body == "sp+0_ao+0");
  CHECK(cfg.control_pb == "sp+0_ao+0");
  CHECK(cfg.seed == 7);
  CHECK(grid_label(0, -5) == "sp+0_ao-5");
  CHECK(grid_label(2.5, 0) == "sp+2.5_ao+0");
}

TEST_CASE("conditions resolve to their kinds and overrides") {
  const auto cfg = ExperimentConfig::parse(kGrid);
  const auto conds = cfg.resolved_conditions();
  REQUIRE(conds.size() == 4);
  CHECK(conds[0].kind == Condition::Kind::Model);
  CHECK(conds[0].control.c_u == 3.0);
  CHECK(conds[1].kind == Condition::Kind::None);
  CHECK(conds[2].kind == Condition::Kind::Pd);
  CHECK(conds[2].pd.kp == 0.1);
  CHECK(conds[3].control.c_u == 10.0);
  CHECK(conds[3].control.c_l == 30.0);
  CHECK(conds[3].pb_label == "sp-5_ao+0");
  CHECK_THROWS_AS(cfg.condition("missing"), ConfigError);
}

TEST_CASE("config errors name the problem") {
  auto message = [](const std::string& text) {
    try {
      ExperimentConfig::parse(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("[train]\nepochz = 3\n").find("epochz") != std::string::npos);
  CHECK(message("[train]\nepochs = many\n").find("epochs") != std::string::npos);
  CHECK(message("[nonsense]\nx = 1\n").find("nonsense") != std::string::npos);
  CHECK(message("[grid]\nspine_pitch_deg = 0\n").find("grid") != std::string::npos);
  CHECK(message("[control]\nbody = nowhere\n").find("nowhere") != std::string::npos);
  CHECK(message("[control]\nnoise_z = -1\n").find("noise_z") != std::string::npos);
  CHECK(message("[adapt]\nbodies = ghost\n").find("ghost") != std::string::npos);
  CHECK(message("[pd]\npd1 = 0.1\n").find("pd1") != std::string::npos);
  CHECK(message("[body.a]\nnoise_z = 1\n[body.a]\nnoise_z = 2\n") != "no error");
  CHECK(message("[variant.x]\nc_u = 1\n[control]\nconditions = x\n") == "no error");
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/config.ini"), ConfigError);
}

TEST_CASE("canonical form and hash are stable") {
  const auto a = ExperimentConfig::parse(kGrid);
  const auto b = ExperimentConfig::parse(std::string("\n; comment\n") + kGrid);
  CHECK(a.canonical() == b.canonical());
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 64);
  CHECK(ExperimentConfig::parse(a.canonical()).canonical() == a.canonical());
  std::string changed = kGrid;
  changed.replace(changed.find("seed = 7"), 8, "seed = 8");
  CHECK(ExperimentConfig::parse(changed).hash() != a.hash());
}

TEST_CASE("derived seeds are deterministic and distinct") {
  CHECK(derive_seed(1, "collect", 0) == derive_seed(1, "collect", 0));
  std::set<std::uint64_t> seen;
  for (std::uint64_t base : {1u, 2u})
    for (const char* tag : {"collect", "train", "trial"})
      for (std::uint64_t i = 0; i < 20; ++i) seen.insert(derive_seed(base, tag, i));
  CHECK(seen.size() == 120);
}

TEST_CASE("checked-in configs parse") {
  for (const char* name : {"sim.ini"}) {
    const auto cfg = ExperimentConfig::load(std::string(PBAL_CONFIG_DIR) + "/" + name);
    CHECK_NOTHROW(cfg.resolved_conditions());
  }
}

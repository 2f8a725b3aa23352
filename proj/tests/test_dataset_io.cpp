#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "pbal/dataset_io.hpp"
#include "support.hpp"

using namespace pbal;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("pbal_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("shortest round-trip number formatting") {
  test::Gen g(1);
  for (int i = 0; i < 2000; ++i) {
    const double v = g.real(-1, 1) * std::pow(10.0, g.integer(-20, 20));
    CHECK(parse_double(format_double(v)) == v);
  }
  CHECK(format_double(0.1) == "0.1");
  CHECK(parse_double(format_double(std::numeric_limits<double>::denorm_min())) ==
        std::numeric_limits<double>::denorm_min());
  CHECK_THROWS(parse_double("abc"));
}

TEST_CASE("episode CSV round trip is exact and deterministic") {
  const auto dir = scratch_dir("episode");
  BodyConfig c;
  c.label = "sp+0_ao+0";
  c.noise_z = 0.01;
  const auto ep = run_collection(c, PolicyKind::Proposed, 40, 7);
  write_episode_csv(ep, dir / "a.csv", {{"config_hash", "abc"}});
  write_episode_csv(ep, dir / "b.csv", {{"config_hash", "abc"}});
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));

  const auto back = read_episode_csv(dir / "a.csv");
  CHECK(back.label == ep.label);
  CHECK(back.seed == ep.seed);
  CHECK(back.policy == ep.policy);
  REQUIRE(back.size() == ep.size());
  for (std::size_t t = 0; t < ep.size(); ++t) {
    CHECK(back.states[t].flatten() == ep.states[t].flatten());
    CHECK(back.commands[t] == ep.commands[t]);
  }
  const auto meta = read_metadata(dir / "a.csv");
  bool has_hash = false;
  for (const auto& [k, v] : meta) has_hash |= k == "config_hash" && v == "abc";
  CHECK(has_hash);
  fs::remove_all(dir);
}

TEST_CASE("manifest round trip and dataset loading") {
  const auto dir = scratch_dir("manifest");
  BodyConfig a, b;
  a.label = "x";
  b.label = "y";
  b.ankle_offset_deg = 5.0;
  std::vector<ManifestEntry> entries;
  for (const auto* cfg : {&a, &b}) {
    const auto ep = run_collection(*cfg, PolicyKind::Proposed, 25, 3);
    const std::string file = cfg->label + ".csv";
    write_episode_csv(ep, dir / file);
    entries.push_back({file, ep.label, ep.policy, ep.seed, ep.size(), ep.fell, ""});
  }
  entries.push_back({"", "z", PolicyKind::Random, 9, 0, true, "fell, after 3 ticks"});
  write_manifest(entries, dir / "manifest.csv");
  const auto back = read_manifest(dir / "manifest.csv");
  REQUIRE(back.size() == 3);
  CHECK(back[1].label == "y");
  CHECK(back[2].error.find("fell") != std::string::npos);

  const auto eps = load_dataset(dir / "manifest.csv");
  REQUIRE(eps.size() == 2);
  CHECK(eps[0].label == "x");
  CHECK(eps[1].size() == 25);

  fs::remove(dir / "x.csv");
  CHECK_THROWS_AS(load_dataset(dir / "manifest.csv"), DatasetError);
  CHECK_THROWS_AS(read_manifest(dir / "missing.csv"), DatasetError);
  fs::remove_all(dir);
}

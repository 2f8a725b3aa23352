#include "pbal/collect.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

namespace pbal {

std::string_view to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::Proposed: return "proposed";
    case PolicyKind::Gradual: return "gradual";
    case PolicyKind::Random: return "random";
  }
  return "unknown";
}

PolicyKind parse_policy(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  for (auto kind : {PolicyKind::Proposed, PolicyKind::Gradual, PolicyKind::Random})
    if (lower == to_string(kind)) return kind;
  throw ConfigError(fmt::format("unknown collection policy '{}'", name));
}

double uniform(std::mt19937_64& rng, double a, double b) {
  const double unit = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return a + (b - a) * unit;
}

PolicyState PolicyState::start(PolicyKind kind, std::uint64_t seed, const CollectConstants& k) {
  PolicyState ps;
  ps.kind = kind;
  ps.k = k;
  ps.d = k.c_init_diff;
  ps.rng.seed(seed);
  return ps;
}

double next_command(PolicyState& ps) {
  double delta = 0.0;
  switch (ps.kind) {
    case PolicyKind::Proposed: {
      ps.c += 1;
      ps.d += ps.k.c_diff;
      const double envelope = std::abs(std::sin(std::numbers::pi * (ps.c % ps.k.n_cnt) / ps.k.n_cnt));
      delta = envelope * uniform(ps.rng, -ps.d, ps.d);
      break;
    }
    case PolicyKind::Gradual:
      ps.c += 1;
      ps.d += ps.k.c_diff;
      delta = uniform(ps.rng, -ps.d, ps.d);
      break;
    case PolicyKind::Random:
      ps.c += 1;
      delta = uniform(ps.rng, -1.0, 1.0);
      break;
  }
  ps.last_increment = delta;
  ps.theta_ref = std::clamp(ps.theta_ref + delta, ps.k.theta_min, ps.k.theta_max);
  return ps.theta_ref;
}

Episode run_collection(const BodyConfig& cfg, PolicyKind kind, int steps, std::uint64_t seed,
                       const CollectConstants& k) {
  if (steps < 1) throw std::invalid_argument("collection needs at least one step");
  constexpr int kMinTicks = 10;

  Plant plant(cfg, seed ^ 0x9e3779b97f4a7c15ull);
  auto ps = PolicyState::start(kind, seed, k);

  Episode ep;
  ep.label = cfg.label;
  ep.policy = kind;
  ep.seed = seed;
  ep.states.reserve(static_cast<std::size_t>(steps));
  ep.commands.reserve(static_cast<std::size_t>(steps));

  for (int t = 0; t < steps; ++t) {
    ep.states.push_back(plant.sense());
    const double u = next_command(ps);
    ep.commands.push_back(u);
    plant.step(u);
    if (plant.is_fallen()) {
      ep.fell = true;
      break;
    }
  }
  if (ep.fell && static_cast<int>(ep.size()) < kMinTicks)
    throw CollectionError(fmt::format(
        "body '{}' fell after {} ticks under the {} policy; use gentler constants "
        "(smaller c_init_diff or c_diff)",
        cfg.label, ep.size(), to_string(kind)));
  return ep;
}

}  // namespace pbal

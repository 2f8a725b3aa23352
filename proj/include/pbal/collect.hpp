#pragma once

// Exploration policies for data collection and the episode recorder.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pbal/plant.hpp"
#include "pbal/types.hpp"

namespace pbal {

enum class PolicyKind { Proposed, Gradual, Random };

std::string_view to_string(PolicyKind kind);
/// Case-insensitive; throws ConfigError on unknown names.
PolicyKind parse_policy(std::string_view name);

struct CollectConstants {
  int n_cnt = 50;             // ticks per sine half-period
  double c_diff = 0.002;      // rad added to the envelope each tick
  double c_init_diff = 0.1;   // rad
  double theta_min = kThetaMin;
  double theta_max = kThetaMax;
};

/// Uniform double in [a, b) from a 64-bit engine. Spelled out so sequences
/// do not depend on the standard library's distribution implementation.
double uniform(std::mt19937_64& rng, double a, double b);

struct PolicyState {
  PolicyKind kind = PolicyKind::Proposed;
  int c = 0;
  double d = 0.1;
  double theta_ref = 0.0;
  /// Displacement drawn on the last call, before clipping.
  double last_increment = 0.0;
  CollectConstants k;
  std::mt19937_64 rng;

  static PolicyState start(PolicyKind kind, std::uint64_t seed, const CollectConstants& k = {});
};

/// Advances the policy by one tick and returns the new command.
double next_command(PolicyState& ps);

struct Episode {
  std::string label;
  PolicyKind policy = PolicyKind::Proposed;
  std::uint64_t seed = 0;
  std::vector<SensorState> states;  // s_t, sensed before u_t is applied
  std::vector<double> commands;     // u_t
  bool fell = false;

  std::size_t size() const { return states.size(); }
};

class CollectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs one episode from the upright equilibrium at theta_ref = 0. Stops
/// early if the body falls; throws CollectionError if that happens within
/// the first 10 ticks.
Episode run_collection(const BodyConfig& cfg, PolicyKind kind, int steps, std::uint64_t seed,
                       const CollectConstants& k = {});

}  // namespace pbal

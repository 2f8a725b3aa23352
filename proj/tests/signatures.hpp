#pragma once

// Statistical signatures of the collection policies, shared by the unit
// tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <vector>

#include "pbal/collect.hpp"

namespace pbal::test {

inline std::vector<double> policy_commands(PolicyKind kind, int steps, std::uint64_t seed) {
  auto ps = PolicyState::start(kind, seed);
  std::vector<double> out;
  for (int i = 0; i < steps; ++i) out.push_back(next_command(ps));
  return out;
}

inline std::vector<double> diffs(const std::vector<double>& x, double start = 0.0) {
  std::vector<double> d;
  double prev = start;
  for (double v : x) {
    d.push_back(v - prev);
    prev = v;
  }
  return d;
}

inline double stddev(const std::vector<double>& x) {
  double m = 0.0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(x.size()));
}

/// Std of command increments in windows centered on c = phase (mod 50),
/// pooled over the episode. d[i] is the increment applied at c = i + 1.
inline double pooled_window_std(const std::vector<double>& d, int phase, int half = 5) {
  std::vector<double> pool;
  for (int center = phase; center <= static_cast<int>(d.size()); center += 50)
    for (int c = center - half; c <= center + half; ++c)
      if (c >= 1 && c <= static_cast<int>(d.size())) pool.push_back(d[static_cast<std::size_t>(c - 1)]);
  return stddev(pool);
}

/// True if Proposed shows quieter increments around c = 0 (mod 50) than
/// around c = 25 (mod 50).
inline bool proposed_has_quiet_windows(std::uint64_t seed) {
  const auto d = diffs(policy_commands(PolicyKind::Proposed, 300, seed));
  return pooled_window_std(d, 0) < pooled_window_std(d, 25);
}

inline double max_abs(const std::vector<double>& x, std::size_t from, std::size_t to) {
  double m = 0.0;
  for (std::size_t i = from; i < std::min(to, x.size()); ++i) m = std::max(m, std::abs(x[i]));
  return m;
}

/// Gradual: the largest early increment does not exceed the largest late one.
inline bool gradual_grows(std::uint64_t seed) {
  const auto d = diffs(policy_commands(PolicyKind::Gradual, 300, seed));
  return max_abs(d, 0, 51) <= max_abs(d, 250, 300);
}

/// One-sample Kolmogorov-Smirnov statistic against uniform(-1, 1).
inline double ks_uniform_statistic(std::vector<double> x) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double cdf = std::clamp((x[i] + 1.0) / 2.0, 0.0, 1.0);
    d = std::max({d, cdf - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - cdf});
  }
  return d;
}

/// Asymptotic KS critical value at alpha = 0.01.
inline double ks_critical_01(std::size_t n) { return 1.6276 / std::sqrt(static_cast<double>(n)); }

inline std::vector<double> random_increments(std::size_t n, std::uint64_t seed) {
  auto ps = PolicyState::start(PolicyKind::Random, seed);
  std::vector<double> inc;
  for (std::size_t i = 0; i < n; ++i) {
    next_command(ps);
    inc.push_back(ps.last_increment);
  }
  return inc;
}

}  // namespace pbal::test

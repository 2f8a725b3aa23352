#include "pbal/mpc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "pbal/plant.hpp"

namespace pbal {

std::string_view to_string(HiddenMode mode) {
  return mode == HiddenMode::Persist ? "persist" : "rewarm";
}

HiddenMode parse_hidden_mode(std::string_view name) {
  if (name == "persist") return HiddenMode::Persist;
  if (name == "rewarm") return HiddenMode::Rewarm;
  throw ConfigError(fmt::format("unknown hidden-state mode '{}'", name));
}

std::string_view to_string(LossSpace space) {
  return space == LossSpace::Physical ? "physical" : "normalized";
}

LossSpace parse_loss_space(std::string_view name) {
  if (name == "physical") return LossSpace::Physical;
  if (name == "normalized") return LossSpace::Normalized;
  throw ConfigError(fmt::format("unknown loss space '{}'", name));
}

void ControlConfig::validate() const {
  if (n_step < 2) throw ConfigError("control: n_step must be >= 2");
  if (n_batch < 2) throw ConfigError("control: n_batch must be >= 2");
  if (n_epoch < 1) throw ConfigError("control: n_epoch must be >= 1");
  if (!(gamma_max > 0.0)) throw ConfigError("control: gamma_max must be positive");
  if (!(c_f >= 0.0 && c_l >= 0.0 && c_u >= 0.0)) throw ConfigError("control: loss weights must be >= 0");
  if (!z_ref.allFinite()) throw ConfigError("control: z_ref must be finite");
  if (rewarm_ticks < 0) throw ConfigError("control: rewarm_ticks must be >= 0");
  if (!(theta_min < theta_max)) throw ConfigError("control: theta_min must be below theta_max");
}

std::vector<double> gamma_grid(const ControlConfig& cc) {
  std::vector<double> g{0.0};
  const int n = cc.n_batch - 1;
  if (n == 1) {
    g.push_back(cc.gamma_max);
    return g;
  }
  // gamma_max * r^(n-1-j), r^(n-1) = 1/100.
  const double r = std::pow(100.0, -1.0 / (n - 1));
  for (int j = 0; j < n; ++j) g.push_back(cc.gamma_max * std::pow(r, n - 1 - j));
  return g;
}

Vec loss_scale(const Checkpoint& ckpt, const ControlConfig& cc) {
  if (cc.space == LossSpace::Physical) return Vec::Ones(ckpt.arch.n_s());
  return ckpt.norm.s_std;
}

namespace {

/// Loss of every column given flattened physical states (n_s x B per step)
/// and commands (N x B).
Eigen::RowVectorXd loss_columns(std::span<const Mat> states, const Mat& u, const ControlConfig& cc,
                                const Vec& scale) {
  const auto N = static_cast<Eigen::Index>(states.size());
  const auto B = u.cols();
  const auto n_s = states.front().rows();
  const auto n_m = (n_s - 2) / 2;
  const Vec inv = scale.size() == 0 ? Vec::Ones(n_s) : Vec(scale.cwiseInverse());

  Eigen::RowVectorXd z2 = Eigen::RowVectorXd::Zero(B), f2 = z2, l2 = z2;
  for (Eigen::Index k = 0; k < N; ++k) {
    const Mat& s = states[k];
    for (int d = 0; d < 2; ++d)
      z2 += ((s.row(d).array() - cc.z_ref[d]) * inv[d]).square().matrix();
    if (k >= 2) {
      const Mat& prev = states[k - 1];
      for (Eigen::Index i = 0; i < n_m; ++i) {
        const auto fi = 2 + i, li = 2 + n_m + i;
        f2 += ((s.row(fi) - prev.row(fi)).array() * inv[fi]).square().matrix();
        l2 += ((s.row(li) - prev.row(li)).array() * inv[li]).square().matrix();
      }
    }
  }
  const Eigen::RowVectorXd u2 = u.colwise().squaredNorm();
  return (z2.array().sqrt() + cc.c_f * f2.array().sqrt() + cc.c_l * l2.array().sqrt() +
          cc.c_u * u2.array().sqrt())
      .matrix();
}

void check_lengths(std::size_t n_pred, std::size_t n_u, const ControlConfig& cc) {
  if (n_pred != n_u || n_pred != static_cast<std::size_t>(cc.n_step))
    throw nn::DimensionError(fmt::format("control loss: {} predictions and {} commands for N_step={}",
                                         n_pred, n_u, cc.n_step));
}

}  // namespace

double control_loss(std::span<const SensorState> pred, std::span<const double> u,
                    const ControlConfig& cc, const Vec& scale) {
  check_lengths(pred.size(), u.size(), cc);
  std::vector<Mat> states;
  for (const auto& s : pred) states.emplace_back(s.flatten());
  Mat um(static_cast<Eigen::Index>(u.size()), 1);
  for (std::size_t k = 0; k < u.size(); ++k) um(static_cast<Eigen::Index>(k), 0) = u[k];
  return loss_columns(states, um, cc, scale)(0);
}

Eigen::RowVectorXd control_loss_batch(std::span<const Mat> states, const Mat& u,
                                      const ControlConfig& cc, const Vec& scale) {
  check_lengths(states.size(), static_cast<std::size_t>(u.rows()), cc);
  return loss_columns(states, u, cc, scale);
}

LossGradient control_loss_grad(std::span<const SensorState> pred, std::span<const double> u,
                               const ControlConfig& cc, const Vec& scale) {
  check_lengths(pred.size(), u.size(), cc);
  const auto N = pred.size();
  const auto n_m = pred.front().n_muscles();
  const auto n_s = pred.front().dim();
  const Vec inv = scale.size() == 0 ? Vec::Ones(n_s) : Vec(scale.cwiseInverse());

  std::vector<Vec> x;
  for (const auto& s : pred) x.push_back(s.flatten());

  LossGradient g;
  g.d_state.assign(N, Vec::Zero(n_s));
  g.d_u.assign(N, 0.0);

  // ||z - z_ref||
  double z2 = 0.0;
  for (const auto& v : x)
    for (int d = 0; d < 2; ++d) z2 += std::pow((v[d] - cc.z_ref[d]) * inv[d], 2);
  if (z2 > 0.0) {
    const double nz = std::sqrt(z2);
    for (std::size_t k = 0; k < N; ++k)
      for (int d = 0; d < 2; ++d)
        g.d_state[k][d] += (x[k][d] - cc.z_ref[d]) * inv[d] * inv[d] / nz;
  }

  // C ||y[k] - y[k-1]|| over k = 2..N-1 (0-indexed) for a block of rows.
  auto diff_term = [&](double weight, Eigen::Index first) {
    if (weight == 0.0) return;
    double sq = 0.0;
    for (std::size_t k = 2; k < N; ++k)
      for (int i = 0; i < n_m; ++i) {
        const auto r = first + i;
        sq += std::pow((x[k][r] - x[k - 1][r]) * inv[r], 2);
      }
    if (sq == 0.0) return;
    const double n = std::sqrt(sq);
    for (std::size_t k = 2; k < N; ++k)
      for (int i = 0; i < n_m; ++i) {
        const auto r = first + i;
        const double d = weight * (x[k][r] - x[k - 1][r]) * inv[r] * inv[r] / n;
        g.d_state[k][r] += d;
        g.d_state[k - 1][r] -= d;
      }
  };
  diff_term(cc.c_f, 2);
  diff_term(cc.c_l, 2 + n_m);

  double u2 = 0.0;
  for (double v : u) u2 += v * v;
  if (cc.c_u != 0.0 && u2 > 0.0) {
    const double nu = std::sqrt(u2);
    for (std::size_t k = 0; k < N; ++k) g.d_u[k] = cc.c_u * u[k] / nu;
  }
  return g;
}

ControllerState ControllerState::initial(const Checkpoint& ckpt) {
  ControllerState cs;
  cs.hidden = HiddenState::zeros(ckpt.arch, 1);
  return cs;
}

std::vector<double> warm_start(const ControllerState& cs, int n_step) {
  if (cs.u_prev.empty()) return std::vector<double>(static_cast<std::size_t>(n_step), 0.0);
  if (cs.u_prev.size() != static_cast<std::size_t>(n_step))
    throw nn::DimensionError(fmt::format("warm start: stored sequence has {} entries, N_step={}",
                                         cs.u_prev.size(), n_step));
  std::vector<double> u(cs.u_prev.begin() + 1, cs.u_prev.end());
  u.push_back(cs.u_prev.back());
  return u;
}

ControlOutput control_step(const SensorState& s, ControllerState& cs, const ControlConfig& cc,
                           const Vec& p, const Checkpoint& ckpt) {
  cc.validate();
  const auto N = static_cast<std::size_t>(cc.n_step);
  const auto grid = gamma_grid(cc);
  const Vec scale = loss_scale(ckpt, cc);

  HiddenState hidden = cs.hidden;
  if (cc.hidden == HiddenMode::Rewarm)
    hidden = advance_hidden(ckpt, cs.history_s, cs.history_u, p, HiddenState::zeros(ckpt.arch, 1));

  ControlOutput out;
  auto& log = out.log;
  log.u_init = warm_start(cs, cc.n_step);
  std::vector<double> u = log.u_init;
  double current = std::numeric_limits<double>::quiet_NaN();

  auto clip = [&](double v) { return std::clamp(v, cc.theta_min, cc.theta_max); };

  for (int epoch = 0; epoch < cc.n_epoch; ++epoch) {
    std::vector<double> grad(N, 0.0);
    try {
      RecordedRollout rr(ckpt, s, u, p, hidden);
      if (epoch == 0) {
        current = control_loss(rr.predictions(), u, cc, scale);
        log.initial_loss = current;
      }
      const auto lg = control_loss_grad(rr.predictions(), u, cc, scale);
      const auto pg = rr.grad_wrt(lg.d_state, kGradControls);
      for (std::size_t k = 0; k < N; ++k) grad[k] = (*pg.controls)[k] + lg.d_u[k];
    } catch (const nn::NumericError& e) {
      log.fault = true;
      log.message = e.what();
      break;
    }

    Mat cand(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(grid.size()));
    for (std::size_t j = 0; j < grid.size(); ++j)
      for (std::size_t k = 0; k < N; ++k)
        cand(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) =
            clip(u[k] - grid[j] * grad[k]);

    Eigen::RowVectorXd losses;
    try {
      losses = control_loss_batch(rollout_batch(ckpt, s, cand, p, hidden), cand, cc, scale);
    } catch (const nn::NumericError& e) {
      log.fault = true;
      log.message = e.what();
      break;
    }
    // The gamma = 0 candidate is the current sequence; reuse its loss so the
    // selected loss can never increase.
    losses[0] = current;

    Eigen::Index best = -1;
    for (Eigen::Index j = 0; j < losses.size(); ++j)
      if (std::isfinite(losses[j]) && (best < 0 || losses[j] < losses[best])) best = j;
    if (best < 0) {
      log.fault = true;
      log.message = "non-finite loss for every candidate";
      break;
    }
    for (std::size_t k = 0; k < N; ++k) u[k] = cand(static_cast<Eigen::Index>(k), best);
    current = losses[best];
    log.gamma.push_back(grid[static_cast<std::size_t>(best)]);
    log.loss.push_back(current);
  }

  if (log.fault && log.loss.empty()) u = log.u_init;
  for (auto& v : u) v = clip(v);
  log.u_opt = u;
  out.u = u.front();
  cs.u_prev = u;

  if (cc.hidden == HiddenMode::Persist) {
    const double u0[1] = {out.u};
    cs.hidden = advance_hidden(ckpt, std::span<const SensorState>(&s, 1), u0, p, cs.hidden);
  } else {
    cs.history_s.push_back(s);
    cs.history_u.push_back(out.u);
    while (cs.history_s.size() > static_cast<std::size_t>(cc.rewarm_ticks)) {
      cs.history_s.erase(cs.history_s.begin());
      cs.history_u.erase(cs.history_u.begin());
    }
  }
  return out;
}

}  // namespace pbal

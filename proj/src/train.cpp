#include "pbal/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include <fmt/format.h>

namespace pbal {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (window < 2) fail("window must be >= 2");
  if (batch < 1) fail("batch must be >= 1");
  if (epochs < 0) fail("epochs must be >= 0");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 0.5)) fail("val_fraction must be in [0, 0.5)");
  if (n_p < 1) fail("n_p must be >= 1");
  if (plateau_patience < 1) fail("plateau_patience must be >= 1");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) fail("plateau_factor must be in (0, 1)");
  if (max_lr_drops < 0) fail("max_lr_drops must be >= 0");
}

WindowSet build_windows(std::span<const Episode> episodes, int window) {
  if (window < 1) throw std::invalid_argument("window must be positive");
  WindowSet set;
  set.length = window;
  std::map<std::string, std::size_t> index;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    if (ep.label.empty()) throw std::invalid_argument("episode without a body-state label");
    if (ep.states.size() != ep.commands.size())
      throw std::invalid_argument(fmt::format("episode '{}' has mismatched states/commands", ep.label));
    auto [it, inserted] = index.try_emplace(ep.label, set.labels.size());
    if (inserted) set.labels.push_back(ep.label);
    if (ep.size() < static_cast<std::size_t>(window)) {
      set.warnings.push_back(fmt::format("episode '{}' (seed {}) has {} ticks, shorter than the "
                                         "window of {}; skipped",
                                         ep.label, ep.seed, ep.size(), window));
      continue;
    }
    for (std::size_t s = 0; s + window <= ep.size(); ++s) set.windows.push_back({e, s, it->second});
  }
  return set;
}

namespace {

/// Normalized copy of every episode, one column per tick.
struct NormalizedData {
  std::vector<Mat> states;    // n_s x T
  std::vector<Mat> commands;  // 1 x T
};

NormalizedData normalize_episodes(const Normalizer& norm, std::span<const Episode> episodes) {
  NormalizedData d;
  for (const auto& ep : episodes) {
    const auto T = static_cast<Eigen::Index>(ep.size());
    const auto n_s = T > 0 ? ep.states.front().dim() : 0;
    Mat s(n_s, T), u(1, T);
    for (Eigen::Index t = 0; t < T; ++t) {
      s.col(t) = norm.normalize_state(ep.states[t].flatten());
      u(0, t) = norm.normalize_command(ep.commands[t]);
    }
    d.states.push_back(std::move(s));
    d.commands.push_back(std::move(u));
  }
  return d;
}

/// Teacher-forced inputs and targets for a batch of windows.
struct Batch {
  std::vector<Mat> inputs, commands, targets;
  Mat pb;
};

Batch make_batch(const NormalizedData& data, std::span<const Window> windows, int length,
                 const std::vector<Vec>& pbs) {
  const auto B = static_cast<Eigen::Index>(windows.size());
  const auto n_s = data.states.front().rows();
  const auto n_p = pbs.front().size();
  Batch b;
  const int steps = length - 1;
  b.inputs.assign(steps, Mat(n_s, B));
  b.commands.assign(steps, Mat(1, B));
  b.targets.assign(steps, Mat(n_s, B));
  b.pb.resize(n_p, B);
  for (Eigen::Index j = 0; j < B; ++j) {
    const auto& w = windows[j];
    const auto& S = data.states[w.episode];
    const auto& U = data.commands[w.episode];
    const auto s0 = static_cast<Eigen::Index>(w.start);
    for (int t = 0; t < steps; ++t) {
      b.inputs[t].col(j) = S.col(s0 + t);
      b.commands[t](0, j) = U(0, s0 + t);
      b.targets[t].col(j) = S.col(s0 + t + 1);
    }
    b.pb.col(j) = pbs[w.label];
  }
  return b;
}

struct BatchLoss {
  double loss = 0.0;
  std::vector<Mat> d_outputs;
};

BatchLoss mse_with_grad(const std::vector<Mat>& outputs, const std::vector<Mat>& targets) {
  BatchLoss r;
  double count = 0.0;
  for (const auto& y : outputs) count += static_cast<double>(y.size());
  for (std::size_t t = 0; t < outputs.size(); ++t) {
    Mat diff = outputs[t] - targets[t];
    r.loss += diff.squaredNorm();
    r.d_outputs.push_back(diff * (2.0 / count));
  }
  r.loss /= count;
  return r;
}

void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

/// Splits windows into those ending before each episode's validation tail
/// and those starting inside it.
void split_windows(const WindowSet& set, std::span<const Episode> episodes, double val_fraction,
                   std::vector<Window>& train, std::vector<Window>& val) {
  for (const auto& w : set.windows) {
    const auto T = episodes[w.episode].size();
    const auto boundary =
        static_cast<std::size_t>(std::floor((1.0 - val_fraction) * static_cast<double>(T)));
    if (val_fraction <= 0.0 || w.start + set.length <= boundary)
      train.push_back(w);
    else if (w.start >= boundary)
      val.push_back(w);
  }
}

double loss_over(const Network& net, const NormalizedData& data, std::span<const Window> windows,
                 int length, const std::vector<Vec>& pbs, const Architecture& arch) {
  constexpr std::size_t kChunk = 256;
  double total = 0.0, count = 0.0;
  for (std::size_t i = 0; i < windows.size(); i += kChunk) {
    const auto part = windows.subspan(i, std::min(kChunk, windows.size() - i));
    auto b = make_batch(data, part, length, pbs);
    SequenceGraph g(net);
    g.forward_teacher(b.inputs, b.commands, b.pb,
                      HiddenState::zeros(arch, static_cast<Eigen::Index>(part.size())));
    for (std::size_t t = 0; t < b.targets.size(); ++t) {
      total += (g.outputs()[t] - b.targets[t]).squaredNorm();
      count += static_cast<double>(b.targets[t].size());
    }
  }
  return count > 0.0 ? total / count : std::numeric_limits<double>::quiet_NaN();
}

std::vector<Vec> pb_vectors(const Checkpoint& ckpt, const WindowSet& set) {
  std::vector<Vec> pbs;
  for (const auto& label : set.labels) {
    const auto idx = ckpt.pb_index(label);
    if (!idx) throw std::invalid_argument(fmt::format("no trained PB for label '{}'", label));
    pbs.push_back(ckpt.pbs[*idx].p);
  }
  return pbs;
}

}  // namespace

TrainResult train_dpmpb(std::span<const Episode> episodes, const TrainConfig& tc,
                        const EpochCallback& on_epoch) {
  tc.validate();
  if (episodes.empty()) throw std::invalid_argument("training dataset is empty");
  const int n_m = episodes.front().states.empty() ? 0 : episodes.front().states.front().n_muscles();
  for (const auto& ep : episodes)
    for (const auto& s : ep.states)
      if (s.n_muscles() != n_m)
        throw std::invalid_argument("episodes disagree on the muscle count");

  TrainResult result;
  const WindowSet set = build_windows(episodes, tc.window);
  result.warnings = set.warnings;
  std::vector<Window> train, val;
  split_windows(set, episodes, tc.val_fraction, train, val);
  if (train.empty()) throw std::invalid_argument("no training windows: episodes too short");

  auto& ckpt = result.ckpt;
  ckpt.arch = Architecture::standard(n_m, tc.n_p);
  ckpt.seed = tc.seed;
  ckpt.train_optimizer = nn::OptimizerConfig::adam(tc.lr);
  ckpt.train_optimizer.beta1 = tc.beta1;
  ckpt.train_optimizer.beta2 = tc.beta2;
  ckpt.train_optimizer.epsilon = tc.eps;
  ckpt.net = Network::random(ckpt.arch, tc.seed);

  // Normalizer from the ticks the training windows cover.
  {
    std::vector<std::vector<bool>> used(episodes.size());
    for (std::size_t e = 0; e < episodes.size(); ++e) used[e].assign(episodes[e].size(), false);
    for (const auto& w : train)
      for (int k = 0; k < tc.window; ++k) used[w.episode][w.start + k] = true;
    std::vector<Vec> states;
    std::vector<double> commands;
    for (std::size_t e = 0; e < episodes.size(); ++e)
      for (std::size_t t = 0; t < episodes[e].size(); ++t)
        if (used[e][t]) {
          states.push_back(episodes[e].states[t].flatten());
          commands.push_back(episodes[e].commands[t]);
        }
    ckpt.norm = Normalizer::fit(states, commands);
  }
  for (const auto& label : set.labels) ckpt.pbs.push_back({label, Vec::Zero(tc.n_p)});

  const NormalizedData data = normalize_episodes(ckpt.norm, episodes);
  std::vector<Vec> pbs(set.labels.size(), Vec::Zero(tc.n_p));

  auto evaluate = [&](int epoch, double lr, double train_loss) {
    EpochLog log{epoch, train_loss, std::numeric_limits<double>::quiet_NaN(), lr};
    if (!val.empty()) log.val_loss = loss_over(ckpt.net, data, val, tc.window, pbs, ckpt.arch);
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
    return log;
  };
  evaluate(0, tc.lr, loss_over(ckpt.net, data, train, tc.window, pbs, ckpt.arch));

  nn::Optimizer opt(ckpt.train_optimizer);
  std::mt19937_64 rng(tc.seed ^ 0x5bd1e995ull);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  double best = std::numeric_limits<double>::infinity();
  int wait = 0, drops = 0;
  std::vector<Window> batch_windows;
  std::vector<Vec> pb_grads(pbs.size());

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    shuffle(order, rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(tc.batch)) {
      const std::size_t n = std::min<std::size_t>(tc.batch, order.size() - i);
      batch_windows.clear();
      for (std::size_t k = 0; k < n; ++k) batch_windows.push_back(train[order[i + k]]);
      auto b = make_batch(data, batch_windows, tc.window, pbs);

      SequenceGraph g(ckpt.net);
      g.forward_teacher(b.inputs, b.commands, b.pb,
                        HiddenState::zeros(ckpt.arch, static_cast<Eigen::Index>(n)));
      auto bl = mse_with_grad(g.outputs(), b.targets);
      if (!std::isfinite(bl.loss))
        throw TrainingError(fmt::format("non-finite training loss at epoch {} batch {} (lr {})",
                                        epoch, i / tc.batch, opt.config().learning_rate));
      auto grads = g.backward(bl.d_outputs, kGradWeights | kGradPb);

      for (auto& pg : pb_grads) pg = Vec::Zero(tc.n_p);
      for (std::size_t k = 0; k < n; ++k)
        pb_grads[batch_windows[k].label] += grads.pb->col(static_cast<Eigen::Index>(k));

      auto slots = zip_slots(ckpt.net, *grads.weights);
      for (std::size_t k = 0; k < pbs.size(); ++k)
        slots.push_back({std::span<double>(pbs[k].data(), pbs[k].size()),
                         std::span<const double>(pb_grads[k].data(), pb_grads[k].size())});
      try {
        opt.step(slots);
      } catch (const nn::NumericError& e) {
        throw TrainingError(fmt::format("epoch {}: {}", epoch, e.what()));
      }
      loss_sum += bl.loss * static_cast<double>(n);
      seen += n;
    }

    const auto log = evaluate(epoch, opt.config().learning_rate, loss_sum / static_cast<double>(seen));
    const double monitored = val.empty() ? log.train_loss : log.val_loss;
    if (monitored < best * (1.0 - tc.plateau_threshold)) {
      best = monitored;
      wait = 0;
    } else if (++wait >= tc.plateau_patience && drops < tc.max_lr_drops) {
      opt.config().learning_rate *= tc.plateau_factor;
      ++drops;
      wait = 0;
    }
  }

  for (std::size_t k = 0; k < pbs.size(); ++k) ckpt.pbs[k].p = pbs[k];
  ckpt.validate();
  return result;
}

double window_loss(const Checkpoint& ckpt, std::span<const Episode> episodes, const WindowSet& set,
                   std::span<const Window> windows) {
  if (windows.empty()) throw std::invalid_argument("window_loss: no windows");
  const auto data = normalize_episodes(ckpt.norm, episodes);
  return loss_over(ckpt.net, data, windows, set.length, pb_vectors(ckpt, set), ckpt.arch);
}

EvalReport evaluate_model(const Checkpoint& ckpt, std::span<const Episode> episodes,
                          const WindowSet& set, std::span<const Window> windows, int horizon) {
  if (windows.empty()) throw std::invalid_argument("evaluate_model: held-out set is empty");
  if (horizon < 1 || set.length < horizon + 1)
    throw std::invalid_argument(
        fmt::format("evaluate_model: windows of {} ticks cannot cover a {}-step horizon", set.length,
                    horizon));
  const auto data = normalize_episodes(ckpt.norm, episodes);
  const auto pbs = pb_vectors(ckpt, set);
  const auto n_s = ckpt.arch.n_s();
  const Vec scale = ckpt.norm.s_std;

  Vec sq1 = Vec::Zero(n_s), sqh = Vec::Zero(n_s);
  double n1 = 0.0, nh = 0.0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t i = 0; i < windows.size(); i += kChunk) {
    const auto part = windows.subspan(i, std::min(kChunk, windows.size() - i));
    const auto B = static_cast<Eigen::Index>(part.size());
    auto b = make_batch(data, part, set.length, pbs);

    SequenceGraph g(ckpt.net);
    g.forward_teacher(b.inputs, b.commands, b.pb, HiddenState::zeros(ckpt.arch, B));
    for (std::size_t t = 0; t < b.targets.size(); ++t) {
      const Mat err = (g.outputs()[t] - b.targets[t]).array().colwise() * scale.array();
      sq1 += err.rowwise().squaredNorm();
      n1 += static_cast<double>(B);
    }

    SequenceGraph c(ckpt.net);
    c.forward_closed_loop(b.inputs[0], std::span<const Mat>(b.commands).first(horizon), b.pb,
                          HiddenState::zeros(ckpt.arch, B));
    const Mat err = (c.outputs().back() - b.targets[horizon - 1]).array().colwise() * scale.array();
    sqh += err.rowwise().squaredNorm();
    nh += static_cast<double>(B);
  }
  EvalReport r;
  r.horizon = horizon;
  r.windows = windows.size();
  r.rmse_1step = (sq1 / n1).cwiseSqrt();
  r.rmse_horizon = (sqh / nh).cwiseSqrt();
  return r;
}

}  // namespace pbal

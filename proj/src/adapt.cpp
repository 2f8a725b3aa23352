#include "pbal/adapt.hpp"

#include <chrono>
#include <cmath>

#include <fmt/format.h>

namespace pbal {

AdaptConfig AdaptConfig::from_checkpoint(const Checkpoint& ckpt) {
  AdaptConfig c;
  c.lr = ckpt.adapt_optimizer.learning_rate;
  c.momentum = ckpt.adapt_optimizer.momentum;
  return c;
}

void AdaptConfig::validate() const {
  if (capacity < 2) throw std::invalid_argument("adapt: capacity must be >= 2");
  if (threshold < 2 || threshold > capacity)
    throw std::invalid_argument("adapt: threshold must be in [2, capacity]");
  if (!(lr > 0.0)) throw std::invalid_argument("adapt: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("adapt: momentum must be in [0, 1)");
}

PbAdapter::PbAdapter(const Checkpoint& ckpt, Vec p0, AdaptConfig cfg)
    : ckpt_(&ckpt), cfg_(cfg), p_(std::move(p0)),
      opt_(nn::OptimizerConfig::momentum_sgd(cfg.lr, cfg.momentum)) {
  cfg_.validate();
  if (p_.size() != ckpt.arch.n_p)
    throw nn::DimensionError(fmt::format("initial PB has {} dims, checkpoint expects {}", p_.size(),
                                         ckpt.arch.n_p));
}

bool PbAdapter::observe(const SensorState& s, double u) {
  if (s.n_muscles() != ckpt_->arch.n_muscles)
    throw nn::DimensionError("adapt: sensor state does not match the checkpoint");
  states_.push_back(s);
  commands_.push_back(u);
  while (states_.size() > cfg_.capacity) {
    states_.pop_front();
    commands_.pop_front();
  }
  if (states_.size() < cfg_.threshold) return false;
  update_pb();
  return true;
}

namespace {

struct BufferPass {
  SequenceGraph graph;
  std::vector<Mat> targets;
};

BufferPass forward_buffer(const Checkpoint& ckpt, const std::deque<SensorState>& states,
                          const std::deque<double>& commands, const Vec& p) {
  std::vector<Mat> s, u;
  BufferPass pass{SequenceGraph(ckpt.net), {}};
  for (std::size_t t = 0; t + 1 < states.size(); ++t) {
    s.push_back(ckpt.norm.normalize_state(states[t].flatten()));
    u.push_back(Mat::Constant(1, 1, ckpt.norm.normalize_command(commands[t])));
    pass.targets.push_back(ckpt.norm.normalize_state(states[t + 1].flatten()));
  }
  pass.graph.forward_teacher(s, u, p, HiddenState::zeros(ckpt.arch, 1));
  return pass;
}

}  // namespace

double PbAdapter::buffer_loss() const {
  if (states_.size() < 2) throw std::logic_error("adapt: buffer needs at least two samples");
  auto pass = forward_buffer(*ckpt_, states_, commands_, p_);
  double sum = 0.0, count = 0.0;
  for (std::size_t t = 0; t < pass.targets.size(); ++t) {
    sum += (pass.graph.outputs()[t] - pass.targets[t]).squaredNorm();
    count += static_cast<double>(pass.targets[t].size());
  }
  return sum / count;
}

void PbAdapter::update_pb() {
  if (states_.size() < cfg_.threshold)
    throw std::logic_error(fmt::format("adapt: buffer holds {} samples, threshold is {}",
                                       states_.size(), cfg_.threshold));
  const auto start = std::chrono::steady_clock::now();
  auto pass = forward_buffer(*ckpt_, states_, commands_, p_);

  double count = 0.0;
  for (const auto& t : pass.targets) count += static_cast<double>(t.size());
  double loss = 0.0;
  std::vector<Mat> d;
  for (std::size_t t = 0; t < pass.targets.size(); ++t) {
    Mat diff = pass.graph.outputs()[t] - pass.targets[t];
    loss += diff.squaredNorm();
    d.push_back(diff * (2.0 / count));
  }
  loss /= count;

  AdaptLogEntry entry;
  entry.loss = loss;
  const Vec grad = pass.graph.backward(d, kGradPb).pb->col(0);
  const nn::ParamSlot slot{std::span<double>(p_.data(), p_.size()),
                           std::span<const double>(grad.data(), grad.size())};
  try {
    opt_.step(std::span<const nn::ParamSlot>(&slot, 1));
    ++updates_;
  } catch (const nn::NumericError&) {
    entry.skipped = true;
  }
  entry.update = updates_;
  entry.p = p_;
  entry.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  log_.push_back(std::move(entry));
}

}  // namespace pbal

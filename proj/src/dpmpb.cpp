#include "pbal/dpmpb.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace pbal {

using nn::Activation;
using nn::DimensionError;

// ---------------------------------------------------------------------------
// SensorState

SensorState SensorState::zeros(int n_muscles) {
  SensorState s;
  s.f = Vec::Zero(n_muscles);
  s.l = Vec::Zero(n_muscles);
  return s;
}

bool SensorState::is_finite() const {
  return z.allFinite() && f.allFinite() && l.allFinite();
}

Vec SensorState::flatten() const {
  Vec v(dim());
  v.head<2>() = z;
  v.segment(2, n_muscles()) = f;
  v.tail(n_muscles()) = l;
  return v;
}

SensorState SensorState::unflatten(const Vec& v, int n_muscles) {
  if (v.size() != 2 + 2 * n_muscles)
    throw DimensionError(fmt::format("sensor vector has {} entries, expected {}", v.size(),
                                     2 + 2 * n_muscles));
  SensorState s;
  s.z = v.head<2>();
  s.f = v.segment(2, n_muscles);
  s.l = v.tail(n_muscles);
  return s;
}

// ---------------------------------------------------------------------------
// Architecture

Architecture Architecture::standard(int n_muscles, int n_p) {
  Architecture a;
  a.n_muscles = n_muscles;
  a.n_p = n_p;
  return a;
}

std::array<int, 10> Architecture::units() const {
  std::array<int, 10> u{};
  u[0] = n_in();
  std::copy(hidden.begin(), hidden.end(), u.begin() + 1);
  u[9] = n_s();
  return u;
}

bool Architecture::is_standard() const {
  return n_u == 1 && hidden == std::array<int, 8>{200, 100, 30, 30, 30, 30, 100, 200};
}

// ---------------------------------------------------------------------------
// Normalizer

Normalizer Normalizer::identity(const Architecture& arch) {
  return {Vec::Zero(arch.n_s()), Vec::Ones(arch.n_s()), Vec::Zero(arch.n_u), Vec::Ones(arch.n_u)};
}

Normalizer Normalizer::fit(std::span<const Vec> states, std::span<const double> commands) {
  if (states.empty() || commands.empty())
    throw std::invalid_argument("Normalizer::fit: no samples");
  const auto n = states.front().size();
  Vec mean = Vec::Zero(n);
  for (const auto& s : states) {
    if (s.size() != n) throw DimensionError("Normalizer::fit: state sizes differ");
    mean += s;
  }
  mean /= static_cast<double>(states.size());
  Vec var = Vec::Zero(n);
  for (const auto& s : states) var.array() += (s - mean).array().square();
  var /= static_cast<double>(states.size());

  double umean = 0.0;
  for (double u : commands) umean += u;
  umean /= static_cast<double>(commands.size());
  double uvar = 0.0;
  for (double u : commands) uvar += (u - umean) * (u - umean);
  uvar /= static_cast<double>(commands.size());

  Normalizer out;
  out.s_mean = mean;
  out.s_std = var.array().sqrt().max(kStdFloor);
  out.u_mean = Vec::Constant(1, umean);
  out.u_std = Vec::Constant(1, std::max(std::sqrt(uvar), kStdFloor));
  return out;
}

Vec Normalizer::normalize_state(const Vec& s) const {
  if (s.size() != s_mean.size()) throw DimensionError("normalize_state: size mismatch");
  return ((s - s_mean).array() / s_std.array()).matrix();
}

Vec Normalizer::denormalize_state(const Vec& s) const {
  if (s.size() != s_mean.size()) throw DimensionError("denormalize_state: size mismatch");
  return (s.array() * s_std.array()).matrix() + s_mean;
}

double Normalizer::normalize_command(double u) const { return (u - u_mean[0]) / u_std[0]; }
double Normalizer::denormalize_command(double u) const { return u * u_std[0] + u_mean[0]; }

// ---------------------------------------------------------------------------
// Network

Network Network::zeros(const Architecture& a) {
  const auto u = a.units();
  Network n;
  for (int k = 0; k < 3; ++k) n.encoder[k] = nn::DenseParams::zeros(u[k], u[k + 1]);
  n.lstm[0] = nn::LstmParams::zeros(u[3], u[4]);
  n.lstm[1] = nn::LstmParams::zeros(u[4], u[5]);
  for (int k = 0; k < 4; ++k) n.decoder[k] = nn::DenseParams::zeros(u[5 + k], u[6 + k]);
  return n;
}

Network Network::random(const Architecture& a, std::uint64_t seed) {
  Network n = zeros(a);
  std::mt19937_64 rng(seed);
  for (auto& d : n.encoder) nn::init_uniform(d, rng);
  for (auto& l : n.lstm) nn::init_uniform(l, rng);
  for (auto& d : n.decoder) nn::init_uniform(d, rng);
  return n;
}

bool Network::matches(const Architecture& a) const {
  const Network ref = zeros(a);
  auto same = [](const auto& x, const auto& y) { return x.rows() == y.rows() && x.cols() == y.cols(); };
  for (std::size_t i = 0; i < encoder.size(); ++i)
    if (!same(encoder[i].W, ref.encoder[i].W) || !same(encoder[i].b, ref.encoder[i].b)) return false;
  for (std::size_t i = 0; i < lstm.size(); ++i)
    if (!same(lstm[i].Wx, ref.lstm[i].Wx) || !same(lstm[i].Wh, ref.lstm[i].Wh) ||
        !same(lstm[i].b, ref.lstm[i].b))
      return false;
  for (std::size_t i = 0; i < decoder.size(); ++i)
    if (!same(decoder[i].W, ref.decoder[i].W) || !same(decoder[i].b, ref.decoder[i].b)) return false;
  return true;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, std::span<const double> s) { n += s.size(); });
  return n;
}

bool Network::operator==(const Network& o) const {
  std::vector<std::span<const double>> a, b;
  visit([&](const std::string&, std::span<const double> s) { a.push_back(s); });
  o.visit([&](const std::string&, std::span<const double> s) { b.push_back(s); });
  if (a.size() != b.size()) return false;
  for (std::size_t k = 0; k < a.size(); ++k)
    if (a[k].size() != b[k].size() || !std::equal(a[k].begin(), a[k].end(), b[k].begin()))
      return false;
  return true;
}

std::vector<nn::ParamSlot> zip_slots(Network& params, const Network& grads) {
  std::vector<nn::ParamSlot> slots;
  params.visit([&](const std::string&, std::span<double> s) { slots.push_back({s, {}}); });
  std::size_t k = 0;
  grads.visit([&](const std::string&, std::span<const double> s) {
    if (k >= slots.size() || slots[k].value.size() != s.size())
      throw DimensionError("zip_slots: parameter and gradient networks differ in shape");
    slots[k++].grad = s;
  });
  if (k != slots.size()) throw DimensionError("zip_slots: tensor count mismatch");
  return slots;
}

// ---------------------------------------------------------------------------
// HiddenState

HiddenState HiddenState::zeros(const Architecture& a, Eigen::Index batch) {
  HiddenState h;
  h.h[0] = Mat::Zero(a.hidden[3], batch);
  h.c[0] = Mat::Zero(a.hidden[3], batch);
  h.h[1] = Mat::Zero(a.hidden[4], batch);
  h.c[1] = Mat::Zero(a.hidden[4], batch);
  return h;
}

HiddenState HiddenState::replicate(Eigen::Index col, Eigen::Index n) const {
  HiddenState out;
  for (int k = 0; k < 2; ++k) {
    out.h[k] = h[k].col(col).replicate(1, n);
    out.c[k] = c[k].col(col).replicate(1, n);
  }
  return out;
}

bool HiddenState::operator==(const HiddenState& o) const {
  for (int k = 0; k < 2; ++k) {
    if (h[k].rows() != o.h[k].rows() || h[k].cols() != o.h[k].cols()) return false;
    if (c[k].rows() != o.c[k].rows() || c[k].cols() != o.c[k].cols()) return false;
    if (h[k] != o.h[k] || c[k] != o.c[k]) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoint helpers

std::optional<std::size_t> Checkpoint::pb_index(std::string_view label) const {
  for (std::size_t k = 0; k < pbs.size(); ++k)
    if (pbs[k].label == label) return k;
  return std::nullopt;
}

const Vec& Checkpoint::pb(std::string_view label) const {
  if (auto k = pb_index(label)) return pbs[*k].p;
  throw std::out_of_range(fmt::format("no parametric bias for label '{}'", label));
}

void Checkpoint::validate() const {
  if (!net.matches(arch)) throw CheckpointError("network tensors do not match architecture");
  if (norm.s_mean.size() != arch.n_s() || norm.s_std.size() != arch.n_s() ||
      norm.u_mean.size() != arch.n_u || norm.u_std.size() != arch.n_u)
    throw CheckpointError("normalizer dims do not match architecture");
  if ((norm.s_std.array() <= 0.0).any() || (norm.u_std.array() <= 0.0).any())
    throw CheckpointError("normalizer has non-positive standard deviation");
  for (const auto& e : pbs) {
    if (e.label.empty()) throw CheckpointError("empty parametric-bias label");
    if (e.p.size() != arch.n_p) throw CheckpointError("parametric bias has wrong dimension");
  }
}

// ---------------------------------------------------------------------------
// SequenceGraph

void SequenceGraph::reset(const HiddenState& h0, Eigen::Index batch) {
  if (h0.batch() != batch) throw DimensionError("initial hidden state batch size mismatch");
  for (int k = 0; k < 2; ++k) {
    if (h0.h[k].rows() != net_->lstm[k].hidden_dim() || h0.c[k].rows() != net_->lstm[k].hidden_dim())
      throw DimensionError("initial hidden state does not match LSTM width");
  }
  steps_.clear();
  outputs_.clear();
  hidden_ = h0;
}

const Mat& SequenceGraph::step(const Mat& s, const Mat& u, const Mat& pb) {
  const Network& n = *net_;
  const auto B = s.cols();
  if (u.cols() != B || pb.cols() != B) throw DimensionError("graph step: batch sizes differ");
  if (s.rows() + u.rows() + pb.rows() != n.encoder[0].in_dim())
    throw DimensionError(fmt::format("graph step: input width {} != {}",
                                     s.rows() + u.rows() + pb.rows(), n.encoder[0].in_dim()));
  StepRecord r;
  r.input.resize(n.encoder[0].in_dim(), B);
  r.input << s, u, pb;
  u_rows_ = u.rows();
  pb_rows_ = pb.rows();
  if (!r.input.allFinite()) throw nn::NumericError("graph step: non-finite input");

  r.enc[0] = nn::dense_forward(n.encoder[0], Activation::Tanh, r.input);
  r.enc[1] = nn::dense_forward(n.encoder[1], Activation::Tanh, r.enc[0]);
  r.enc[2] = nn::dense_forward(n.encoder[2], Activation::Tanh, r.enc[1]);
  r.lstm[0] = nn::lstm_forward(n.lstm[0], r.enc[2], hidden_.h[0], hidden_.c[0]);
  r.lstm[1] = nn::lstm_forward(n.lstm[1], r.lstm[0].h, hidden_.h[1], hidden_.c[1]);
  r.dec[0] = nn::dense_forward(n.decoder[0], Activation::Tanh, r.lstm[1].h);
  r.dec[1] = nn::dense_forward(n.decoder[1], Activation::Tanh, r.dec[0]);
  r.dec[2] = nn::dense_forward(n.decoder[2], Activation::Tanh, r.dec[1]);
  r.dec[3] = nn::dense_forward(n.decoder[3], Activation::Linear, r.dec[2]);

  for (int k = 0; k < 2; ++k) {
    hidden_.h[k] = r.lstm[k].h;
    hidden_.c[k] = r.lstm[k].c;
  }
  outputs_.push_back(r.dec[3]);
  steps_.push_back(std::move(r));
  return outputs_.back();
}

void SequenceGraph::forward_teacher(std::span<const Mat> states, std::span<const Mat> commands,
                                    const Mat& pb, const HiddenState& h0) {
  if (states.size() != commands.size() || states.empty())
    throw DimensionError("forward_teacher: need equal, non-zero numbers of states and commands");
  closed_loop_ = false;
  reset(h0, states.front().cols());
  for (std::size_t t = 0; t < states.size(); ++t) step(states[t], commands[t], pb);
  final_hidden_ = hidden_;
}

void SequenceGraph::forward_closed_loop(const Mat& s0, std::span<const Mat> commands,
                                        const Mat& pb, const HiddenState& h0) {
  if (commands.empty()) throw DimensionError("forward_closed_loop: empty command sequence");
  closed_loop_ = true;
  reset(h0, s0.cols());
  step(s0, commands[0], pb);
  for (std::size_t t = 1; t < commands.size(); ++t) {
    const Mat prev = outputs_.back();
    step(prev, commands[t], pb);
  }
  final_hidden_ = hidden_;
}

Gradients SequenceGraph::backward(std::span<const Mat> d_outputs, unsigned targets) const {
  if (!recorded()) throw nn::StateError("backward called before any forward pass was recorded");
  if ((targets & (kGradWeights | kGradPb | kGradControls)) == 0)
    throw std::invalid_argument("backward: empty gradient target set");
  if (d_outputs.size() != steps_.size())
    throw DimensionError("backward: one upstream gradient per recorded step is required");

  const Network& n = *net_;
  const auto B = steps_.front().input.cols();
  const int n_s = n.decoder[3].out_dim();

  Gradients g;
  Network* wg = nullptr;
  if (targets & kGradWeights) {
    g.weights = n;
    g.weights->visit([](const std::string&, std::span<double> s) {
      std::fill(s.begin(), s.end(), 0.0);
    });
    wg = &*g.weights;
  }

  Mat pb_grad = Mat::Zero(pb_rows_, B);
  std::vector<Mat> u_grads;

  std::array<Mat, 2> dh_carry{Mat::Zero(n.lstm[0].hidden_dim(), B),
                              Mat::Zero(n.lstm[1].hidden_dim(), B)};
  std::array<Mat, 2> dc_carry = dh_carry;
  Mat d_state_next;  // gradient on the state input of step t+1 (closed loop)

  const auto T = steps_.size();
  if (targets & kGradControls) u_grads.resize(T);

  for (std::size_t ti = T; ti-- > 0;) {
    const StepRecord& r = steps_[ti];
    if (d_outputs[ti].rows() != n_s || d_outputs[ti].cols() != B)
      throw DimensionError("backward: upstream gradient shape mismatch");
    Mat d = d_outputs[ti];
    if (closed_loop_ && ti + 1 < T) d += d_state_next;

    d = nn::dense_backward(n.decoder[3], Activation::Linear, r.dec[2], r.dec[3], d,
                           wg ? &wg->decoder[3] : nullptr);
    d = nn::dense_backward(n.decoder[2], Activation::Tanh, r.dec[1], r.dec[2], d,
                           wg ? &wg->decoder[2] : nullptr);
    d = nn::dense_backward(n.decoder[1], Activation::Tanh, r.dec[0], r.dec[1], d,
                           wg ? &wg->decoder[1] : nullptr);
    d = nn::dense_backward(n.decoder[0], Activation::Tanh, r.lstm[1].h, r.dec[0], d,
                           wg ? &wg->decoder[0] : nullptr);

    d += dh_carry[1];
    auto b1 = nn::lstm_backward(n.lstm[1], r.lstm[1], d, dc_carry[1], wg ? &wg->lstm[1] : nullptr);
    dh_carry[1] = std::move(b1.dh_prev);
    dc_carry[1] = std::move(b1.dc_prev);

    Mat d0 = b1.dx + dh_carry[0];
    auto b0 = nn::lstm_backward(n.lstm[0], r.lstm[0], d0, dc_carry[0], wg ? &wg->lstm[0] : nullptr);
    dh_carry[0] = std::move(b0.dh_prev);
    dc_carry[0] = std::move(b0.dc_prev);

    d = nn::dense_backward(n.encoder[2], Activation::Tanh, r.enc[1], r.enc[2], b0.dx,
                           wg ? &wg->encoder[2] : nullptr);
    d = nn::dense_backward(n.encoder[1], Activation::Tanh, r.enc[0], r.enc[1], d,
                           wg ? &wg->encoder[1] : nullptr);
    Mat d_in = nn::dense_backward(n.encoder[0], Activation::Tanh, r.input, r.enc[0], d,
                                  wg ? &wg->encoder[0] : nullptr);

    // Input rows are [state | command | pb].
    if (targets & kGradControls) u_grads[ti] = d_in.middleRows(n_s, u_rows_);
    if (targets & kGradPb) pb_grad += d_in.bottomRows(pb_rows_);
    d_state_next = d_in.topRows(n_s);
  }

  if (targets & kGradControls) g.controls = std::move(u_grads);
  if (targets & kGradPb) g.pb = std::move(pb_grad);
  return g;
}

// ---------------------------------------------------------------------------
// Physical-unit API

namespace {

void check_inputs(const Checkpoint& ckpt, const SensorState& s, const Vec& pb) {
  if (s.n_muscles() != ckpt.arch.n_muscles || s.l.size() != ckpt.arch.n_muscles)
    throw DimensionError(fmt::format("sensor state has {} muscles, checkpoint expects {}",
                                     s.n_muscles(), ckpt.arch.n_muscles));
  if (pb.size() != ckpt.arch.n_p)
    throw DimensionError(fmt::format("parametric bias has {} dims, checkpoint expects {}", pb.size(),
                                     ckpt.arch.n_p));
  if (!s.is_finite()) throw nn::NumericError("non-finite sensor state");
  if (!pb.allFinite()) throw nn::NumericError("non-finite parametric bias");
}

std::vector<Mat> normalized_commands(const Checkpoint& ckpt, std::span<const double> u) {
  std::vector<Mat> out;
  out.reserve(u.size());
  for (double v : u) {
    if (!std::isfinite(v)) throw nn::NumericError("non-finite command");
    out.push_back(Mat::Constant(1, 1, ckpt.norm.normalize_command(v)));
  }
  return out;
}

}  // namespace

StepResult predict_step(const Checkpoint& ckpt, const SensorState& s, double u, const Vec& pb,
                        const HiddenState& hidden) {
  check_inputs(ckpt, s, pb);
  SequenceGraph g(ckpt.net);
  const double us[1] = {u};
  g.forward_closed_loop(ckpt.norm.normalize_state(s.flatten()), normalized_commands(ckpt, us), pb,
                        hidden);
  return {SensorState::unflatten(ckpt.norm.denormalize_state(g.outputs()[0].col(0)),
                                 ckpt.arch.n_muscles),
          g.final_hidden()};
}

std::vector<SensorState> rollout(const Checkpoint& ckpt, const SensorState& s,
                                 std::span<const double> u_seq, const Vec& pb,
                                 const HiddenState& hidden) {
  return RecordedRollout(ckpt, s, u_seq, pb, hidden).predictions();
}

std::vector<Mat> rollout_batch(const Checkpoint& ckpt, const SensorState& s, const Mat& u_seqs,
                               const Vec& pb, const HiddenState& hidden) {
  check_inputs(ckpt, s, pb);
  if (u_seqs.rows() < 1 || u_seqs.cols() < 1)
    throw DimensionError("rollout_batch: empty candidate matrix");
  if (!u_seqs.allFinite()) throw nn::NumericError("rollout_batch: non-finite command");
  const auto B = u_seqs.cols();
  const auto n = ckpt.norm.normalize_state(s.flatten());
  std::vector<Mat> cmds;
  for (Eigen::Index t = 0; t < u_seqs.rows(); ++t)
    cmds.push_back(((u_seqs.row(t).array() - ckpt.norm.u_mean[0]) / ckpt.norm.u_std[0]).matrix());
  const HiddenState h = hidden.batch() == B ? hidden : hidden.replicate(0, B);
  SequenceGraph g(ckpt.net);
  g.forward_closed_loop(n.replicate(1, B), cmds, pb.replicate(1, B), h);
  std::vector<Mat> out;
  out.reserve(g.outputs().size());
  for (const auto& y : g.outputs()) {
    Mat phys = y.array().colwise() * ckpt.norm.s_std.array();
    phys.colwise() += ckpt.norm.s_mean;
    out.push_back(std::move(phys));
  }
  return out;
}

HiddenState advance_hidden(const Checkpoint& ckpt, std::span<const SensorState> states,
                           std::span<const double> commands, const Vec& pb,
                           const HiddenState& hidden) {
  if (states.size() != commands.size())
    throw DimensionError("advance_hidden: states and commands differ in length");
  if (states.empty()) return hidden;
  std::vector<Mat> s;
  s.reserve(states.size());
  for (const auto& st : states) {
    check_inputs(ckpt, st, pb);
    s.push_back(ckpt.norm.normalize_state(st.flatten()));
  }
  SequenceGraph g(ckpt.net);
  g.forward_teacher(s, normalized_commands(ckpt, commands), pb, hidden);
  return g.final_hidden();
}

RecordedRollout::RecordedRollout(const Checkpoint& ckpt, const SensorState& s,
                                 std::span<const double> u_seq, const Vec& pb,
                                 const HiddenState& hidden)
    : ckpt_(&ckpt), graph_(ckpt.net) {
  if (u_seq.empty()) throw DimensionError("rollout: N_step must be at least 1");
  check_inputs(ckpt, s, pb);
  graph_.forward_closed_loop(ckpt.norm.normalize_state(s.flatten()),
                             normalized_commands(ckpt, u_seq), pb, hidden);
  predictions_.reserve(graph_.outputs().size());
  for (const auto& y : graph_.outputs())
    predictions_.push_back(
        SensorState::unflatten(ckpt.norm.denormalize_state(y.col(0)), ckpt.arch.n_muscles));
}

RecordedRollout::PhysicalGradients RecordedRollout::grad_wrt(std::span<const Vec> dloss_dstate,
                                                             unsigned targets) const {
  if (dloss_dstate.size() != predictions_.size())
    throw DimensionError("grad_wrt: one state gradient per predicted step is required");
  std::vector<Mat> d;
  d.reserve(dloss_dstate.size());
  for (const auto& v : dloss_dstate) {
    if (v.size() != ckpt_->arch.n_s()) throw DimensionError("grad_wrt: state gradient size");
    d.push_back(v.cwiseProduct(ckpt_->norm.s_std));
  }
  Gradients g = graph_.backward(d, targets);
  PhysicalGradients out;
  out.weights = std::move(g.weights);
  if (g.pb) out.pb = g.pb->col(0);
  if (g.controls) {
    std::vector<double> u;
    u.reserve(g.controls->size());
    for (const auto& m : *g.controls) u.push_back(m(0, 0) / ckpt_->norm.u_std[0]);
    out.controls = std::move(u);
  }
  return out;
}

}  // namespace pbal

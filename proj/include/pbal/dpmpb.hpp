#pragma once

// Deep predictive model with parametric bias: s_{t+1} = h(s_t, u_t, p).
//
// The stack is input -> FC 200 -> FC 100 -> FC 30 -> LSTM 30 -> LSTM 30 ->
// FC 30 -> FC 100 -> FC 200 -> FC N_s. Every layer but the last uses tanh;
// the last is linear. The network works in normalized units; the Normalizer
// maps sensor states and commands to and from them.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "pbal/tensor_nn.hpp"
#include "pbal/types.hpp"

namespace pbal {

using nn::Mat;
using nn::Vec;

struct Architecture {
  int n_muscles = 4;
  int n_u = 1;
  int n_p = 2;
  /// Widths of the eight hidden layers: three FC, two LSTM, three FC.
  std::array<int, 8> hidden{200, 100, 30, 30, 30, 30, 100, 200};

  static Architecture standard(int n_muscles, int n_p = 2);

  int n_s() const { return 2 + 2 * n_muscles; }
  int n_in() const { return n_s() + n_u + n_p; }
  /// Unit count of every layer including input and output (ten entries).
  std::array<int, 10> units() const;
  bool is_standard() const;

  bool operator==(const Architecture&) const = default;
};

struct Normalizer {
  Vec s_mean, s_std;
  Vec u_mean, u_std;

  static constexpr double kStdFloor = 1e-6;

  static Normalizer identity(const Architecture& arch);
  /// Per-dimension mean and population standard deviation, floored.
  static Normalizer fit(std::span<const Vec> states, std::span<const double> commands);

  Vec normalize_state(const Vec& s) const;
  Vec denormalize_state(const Vec& s) const;
  double normalize_command(double u) const;
  double denormalize_command(double u) const;
};

struct Network {
  std::array<nn::DenseParams, 3> encoder;
  std::array<nn::LstmParams, 2> lstm;
  std::array<nn::DenseParams, 4> decoder;

  static Network zeros(const Architecture& arch);
  static Network random(const Architecture& arch, std::uint64_t seed);

  bool matches(const Architecture& arch) const;
  std::size_t parameter_count() const;

  /// Calls f(name, span) for every parameter tensor in a fixed order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  bool operator==(const Network& o) const;

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    auto span_of = [](auto& m) {
      using T = std::remove_reference_t<decltype(*m.data())>;
      return std::span<T>(m.data(), static_cast<std::size_t>(m.size()));
    };
    for (std::size_t k = 0; k < self.encoder.size(); ++k) {
      f("encoder." + std::to_string(k) + ".W", span_of(self.encoder[k].W));
      f("encoder." + std::to_string(k) + ".b", span_of(self.encoder[k].b));
    }
    for (std::size_t k = 0; k < self.lstm.size(); ++k) {
      f("lstm." + std::to_string(k) + ".Wx", span_of(self.lstm[k].Wx));
      f("lstm." + std::to_string(k) + ".Wh", span_of(self.lstm[k].Wh));
      f("lstm." + std::to_string(k) + ".b", span_of(self.lstm[k].b));
    }
    for (std::size_t k = 0; k < self.decoder.size(); ++k) {
      f("decoder." + std::to_string(k) + ".W", span_of(self.decoder[k].W));
      f("decoder." + std::to_string(k) + ".b", span_of(self.decoder[k].b));
    }
  }
};

/// Pairs every tensor of `params` with the same tensor of `grads`.
std::vector<nn::ParamSlot> zip_slots(Network& params, const Network& grads);

/// LSTM (h, c) for both layers, one column per batch item.
struct HiddenState {
  std::array<Mat, 2> h;
  std::array<Mat, 2> c;

  static HiddenState zeros(const Architecture& arch, Eigen::Index batch = 1);
  Eigen::Index batch() const { return h[0].cols(); }
  /// Copies column `col` into `n` columns.
  HiddenState replicate(Eigen::Index col, Eigen::Index n) const;
  bool operator==(const HiddenState& o) const;
};

struct PbEntry {
  std::string label;
  Vec p;
};

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  Architecture arch;
  Network net;
  Normalizer norm;
  std::vector<PbEntry> pbs;
  std::uint64_t seed = 0;
  nn::OptimizerConfig train_optimizer = nn::OptimizerConfig::adam();
  nn::OptimizerConfig adapt_optimizer = nn::OptimizerConfig::momentum_sgd(0.01, 0.9);

  /// Throws std::out_of_range naming the label if absent.
  const Vec& pb(std::string_view label) const;
  std::optional<std::size_t> pb_index(std::string_view label) const;
  void validate() const;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Little-endian container of named arrays with a format version and a
/// SHA-256 trailer. Throws CheckpointError on I/O failure, version mismatch
/// or corruption.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Recorded forward passes and reverse mode.

enum GradTarget : unsigned {
  kGradWeights = 1u << 0,
  kGradPb = 1u << 1,
  kGradControls = 1u << 2,
};

struct Gradients {
  std::optional<Network> weights;
  std::optional<Mat> pb;                    // n_p x B
  std::optional<std::vector<Mat>> controls;  // per step, n_u x B
};

/// A recorded unroll of the network over T steps for a batch of B columns,
/// in normalized units. Teacher-forced unrolls read s_t from the caller at
/// every step; closed-loop unrolls feed each prediction back as the next
/// state input.
class SequenceGraph {
 public:
  explicit SequenceGraph(const Network& net) : net_(&net) {}

  void forward_teacher(std::span<const Mat> states, std::span<const Mat> commands, const Mat& pb,
                       const HiddenState& h0);
  void forward_closed_loop(const Mat& s0, std::span<const Mat> commands, const Mat& pb,
                           const HiddenState& h0);

  bool recorded() const { return !steps_.empty(); }
  std::size_t length() const { return steps_.size(); }
  /// outputs()[t] is the prediction of s_{t+1}.
  const std::vector<Mat>& outputs() const { return outputs_; }
  const HiddenState& final_hidden() const { return final_hidden_; }

  /// d_outputs[t] is dL/d outputs()[t]. `targets` is a GradTarget mask.
  Gradients backward(std::span<const Mat> d_outputs, unsigned targets) const;

 private:
  struct StepRecord {
    Mat input;
    std::array<Mat, 3> enc;
    std::array<nn::LstmCache, 2> lstm;
    std::array<Mat, 4> dec;
  };

  void reset(const HiddenState& h0, Eigen::Index batch);
  const Mat& step(const Mat& s, const Mat& u, const Mat& pb);

  const Network* net_;
  bool closed_loop_ = false;
  Eigen::Index u_rows_ = 0;
  Eigen::Index pb_rows_ = 0;
  std::vector<StepRecord> steps_;
  std::vector<Mat> outputs_;
  HiddenState hidden_;
  HiddenState final_hidden_;
};

// ---------------------------------------------------------------------------
// Physical-unit API.

struct StepResult {
  SensorState next;
  HiddenState hidden;
};

StepResult predict_step(const Checkpoint& ckpt, const SensorState& s, double u, const Vec& pb,
                        const HiddenState& hidden);

/// Closed-loop unroll; returns predictions of s_{t+1..t+N}. `hidden` is not
/// modified.
std::vector<SensorState> rollout(const Checkpoint& ckpt, const SensorState& s,
                                 std::span<const double> u_seq, const Vec& pb,
                                 const HiddenState& hidden);

/// Closed-loop unroll of several command sequences from one start, batched.
/// `u_seqs` is N_step x B (one candidate per column). Result[k] is the
/// physical state vector matrix (n_s x B) after k+1 steps.
std::vector<Mat> rollout_batch(const Checkpoint& ckpt, const SensorState& s, const Mat& u_seqs,
                               const Vec& pb, const HiddenState& hidden);

/// Feeds a recorded sequence through the model from `hidden` and returns the
/// hidden state after the last pair.
HiddenState advance_hidden(const Checkpoint& ckpt, std::span<const SensorState> states,
                           std::span<const double> commands, const Vec& pb,
                           const HiddenState& hidden);

/// A closed-loop unroll in physical units kept for gradient queries.
class RecordedRollout {
 public:
  RecordedRollout(const Checkpoint& ckpt, const SensorState& s, std::span<const double> u_seq,
                  const Vec& pb, const HiddenState& hidden);

  const std::vector<SensorState>& predictions() const { return predictions_; }

  struct PhysicalGradients {
    std::optional<Network> weights;
    std::optional<Vec> pb;
    std::optional<std::vector<double>> controls;
  };

  /// dloss_dstate[k] = dL/d predictions()[k] as flattened physical vectors.
  PhysicalGradients grad_wrt(std::span<const Vec> dloss_dstate, unsigned targets) const;

 private:
  const Checkpoint* ckpt_;
  SequenceGraph graph_;
  std::vector<SensorState> predictions_;
};

}  // namespace pbal

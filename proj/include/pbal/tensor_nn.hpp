#pragma once

// Dense kernels for the fixed FC/LSTM stack: forward passes, cached batch
// variants for reverse mode, losses and the two optimizers.
//
// Batched functions lay samples out as columns: a batch of B inputs of
// dimension n is an n x B matrix.

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace pbal::nn {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Activation { Tanh, Linear };

struct DenseParams {
  Mat W;  // out x in
  Vec b;  // out

  static DenseParams zeros(int in, int out);
  int in_dim() const { return static_cast<int>(W.cols()); }
  int out_dim() const { return static_cast<int>(W.rows()); }
};

// The four gates are stacked row-wise in the order input, forget, cell
// candidate, output. gate_rows() gives the row block of one gate.
struct LstmParams {
  Mat Wx;  // 4H x in
  Mat Wh;  // 4H x H
  Vec b;   // 4H

  enum Gate { kInput = 0, kForget = 1, kCell = 2, kOutput = 3 };

  static LstmParams zeros(int in, int hidden);
  int in_dim() const { return static_cast<int>(Wx.cols()); }
  int hidden_dim() const { return static_cast<int>(Wh.cols()); }

  auto gate_input_weights(Gate g) { return Wx.middleRows(g * hidden_dim(), hidden_dim()); }
  auto gate_input_weights(Gate g) const { return Wx.middleRows(g * hidden_dim(), hidden_dim()); }
  auto gate_recurrent_weights(Gate g) { return Wh.middleRows(g * hidden_dim(), hidden_dim()); }
  auto gate_recurrent_weights(Gate g) const { return Wh.middleRows(g * hidden_dim(), hidden_dim()); }
  auto gate_bias(Gate g) { return b.segment(g * hidden_dim(), hidden_dim()); }
  auto gate_bias(Gate g) const { return b.segment(g * hidden_dim(), hidden_dim()); }
};

/// Uniform in +-1/sqrt(fan_in).
void init_uniform(DenseParams& p, std::mt19937_64& rng);
void init_uniform(LstmParams& p, std::mt19937_64& rng);

double sigmoid(double x);

Vec fc_forward(const Vec& x, const DenseParams& params, Activation act);

struct LstmOutput {
  Vec h;
  Vec c;
};

LstmOutput lstm_step(const Vec& x, const Vec& h_prev, const Vec& c_prev, const LstmParams& params);

// ---------------------------------------------------------------------------
// Batched forward with caches, and the matching backward passes.

/// Y = act(W X + b).
Mat dense_forward(const DenseParams& p, Activation act, const Mat& X);

/// Accumulates dW, db into `grad` (if non-null) and returns dL/dX.
/// `Y` must be the output returned by dense_forward for the same X.
Mat dense_backward(const DenseParams& p, Activation act, const Mat& X, const Mat& Y,
                   const Mat& dY, DenseParams* grad);

struct LstmCache {
  Mat x, h_prev, c_prev;
  Mat i, f, g, o;  // post-activation gates
  Mat c, tanh_c, h;
};

LstmCache lstm_forward(const LstmParams& p, const Mat& X, const Mat& H, const Mat& C);

struct LstmBackward {
  Mat dx;
  Mat dh_prev;
  Mat dc_prev;
};

/// dh: gradient arriving at h_t (from the layer above and from t+1).
/// dc_next: gradient arriving at c_t from t+1.
LstmBackward lstm_backward(const LstmParams& p, const LstmCache& cache, const Mat& dh,
                           const Mat& dc_next, LstmParams* grad);

// ---------------------------------------------------------------------------
// Losses

/// Mean over all elements of all steps.
double mse_loss(std::span<const Mat> pred, std::span<const Mat> target);
double mse_loss(const Mat& pred, const Mat& target);

/// d mse / d pred for each step, consistent with mse_loss over the same set.
std::vector<Mat> mse_grad(std::span<const Mat> pred, std::span<const Mat> target);

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { Adam, MomentumSGD };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.9;

  static OptimizerConfig adam(double lr = 1e-3) { return {OptimizerKind::Adam, lr}; }
  static OptimizerConfig momentum_sgd(double lr, double momentum = 0.9) {
    OptimizerConfig c;
    c.kind = OptimizerKind::MomentumSGD;
    c.learning_rate = lr;
    c.momentum = momentum;
    return c;
  }
};

struct ParamSlot {
  std::span<double> value;
  std::span<const double> grad;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  /// Applies one update to every slot. Slots must arrive in the same order
  /// and with the same sizes on every call. Throws NumericError if any
  /// gradient entry is non-finite; in that case nothing is modified.
  void step(std::span<const ParamSlot> slots);

  const OptimizerConfig& config() const { return cfg_; }
  OptimizerConfig& config() { return cfg_; }
  std::int64_t step_count() const { return steps_; }
  void reset();

 private:
  OptimizerConfig cfg_;
  std::int64_t steps_ = 0;
  std::vector<Vec> first_;   // Adam m, or momentum velocity
  std::vector<Vec> second_;  // Adam v
};

}  // namespace pbal::nn

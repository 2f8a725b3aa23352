#include "pbal/tensor_nn.hpp"

#include <cmath>
#include <fmt/format.h>

namespace pbal::nn {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw DimensionError(what);
}

template <class M>
void fill_uniform(M& m, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
}

Mat sigmoid(const Mat& z) {
  return z.unaryExpr([](double v) { return pbal::nn::sigmoid(v); });
}

}  // namespace

DenseParams DenseParams::zeros(int in, int out) {
  return {Mat::Zero(out, in), Vec::Zero(out)};
}

LstmParams LstmParams::zeros(int in, int hidden) {
  return {Mat::Zero(4 * hidden, in), Mat::Zero(4 * hidden, hidden), Vec::Zero(4 * hidden)};
}

void init_uniform(DenseParams& p, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(p.in_dim()));
  fill_uniform(p.W, bound, rng);
  fill_uniform(p.b, bound, rng);
}

void init_uniform(LstmParams& p, std::mt19937_64& rng) {
  // Both the input and the recurrent weights feed the same pre-activation.
  const double bound = 1.0 / std::sqrt(static_cast<double>(p.in_dim() + p.hidden_dim()));
  fill_uniform(p.Wx, bound, rng);
  fill_uniform(p.Wh, bound, rng);
  fill_uniform(p.b, bound, rng);
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Vec fc_forward(const Vec& x, const DenseParams& params, Activation act) {
  require(x.size() == params.in_dim(), "fc_forward: input size does not match layer in-dim");
  require(params.b.size() == params.out_dim(), "fc_forward: bias size does not match layer out-dim");
  Vec y = params.W * x + params.b;
  if (act == Activation::Tanh) y = y.array().tanh();
  return y;
}

LstmOutput lstm_step(const Vec& x, const Vec& h_prev, const Vec& c_prev, const LstmParams& params) {
  const LstmCache cache = lstm_forward(params, x, h_prev, c_prev);
  return {cache.h.col(0), cache.c.col(0)};
}

Mat dense_forward(const DenseParams& p, Activation act, const Mat& X) {
  require(X.rows() == p.in_dim(), "dense_forward: input rows do not match layer in-dim");
  require(p.b.size() == p.out_dim(), "dense_forward: bias size does not match layer out-dim");
  Mat Y = p.W * X;
  Y.colwise() += p.b;
  if (act == Activation::Tanh) Y = Y.array().tanh();
  return Y;
}

Mat dense_backward(const DenseParams& p, Activation act, const Mat& X, const Mat& Y,
                   const Mat& dY, DenseParams* grad) {
  require(dY.rows() == p.out_dim() && dY.cols() == X.cols(), "dense_backward: upstream shape");
  Mat dA = dY;
  if (act == Activation::Tanh) dA.array() *= 1.0 - Y.array().square();
  if (grad != nullptr) {
    grad->W.noalias() += dA * X.transpose();
    grad->b += dA.rowwise().sum();
  }
  return p.W.transpose() * dA;
}

LstmCache lstm_forward(const LstmParams& p, const Mat& X, const Mat& H, const Mat& C) {
  const int hd = p.hidden_dim();
  require(X.rows() == p.in_dim(), "lstm: input rows do not match in-dim");
  require(H.rows() == hd && C.rows() == hd, "lstm: state rows do not match hidden dim");
  require(H.cols() == X.cols() && C.cols() == X.cols(), "lstm: batch sizes differ");
  require(p.Wh.rows() == 4 * hd && p.Wx.rows() == 4 * hd && p.b.size() == 4 * hd,
          "lstm: gate blocks are not all the same hidden dim");

  LstmCache k;
  k.x = X;
  k.h_prev = H;
  k.c_prev = C;
  Mat z = p.Wx * X;
  z.noalias() += p.Wh * H;
  z.colwise() += p.b;
  k.i = sigmoid(z.middleRows(0 * hd, hd));
  k.f = sigmoid(z.middleRows(1 * hd, hd));
  k.g = z.middleRows(2 * hd, hd).array().tanh();
  k.o = sigmoid(z.middleRows(3 * hd, hd));
  k.c = k.f.cwiseProduct(C) + k.i.cwiseProduct(k.g);
  k.tanh_c = k.c.array().tanh();
  k.h = k.o.cwiseProduct(k.tanh_c);
  return k;
}

LstmBackward lstm_backward(const LstmParams& p, const LstmCache& k, const Mat& dh,
                           const Mat& dc_next, LstmParams* grad) {
  const int hd = p.hidden_dim();
  const auto B = k.x.cols();
  require(dh.rows() == hd && dh.cols() == B, "lstm_backward: dh shape");
  require(dc_next.rows() == hd && dc_next.cols() == B, "lstm_backward: dc shape");

  const Mat dc =
      dc_next + (dh.array() * k.o.array() * (1.0 - k.tanh_c.array().square())).matrix();
  Mat dz(4 * hd, B);
  dz.middleRows(0 * hd, hd) = dc.array() * k.g.array() * k.i.array() * (1.0 - k.i.array());
  dz.middleRows(1 * hd, hd) = dc.array() * k.c_prev.array() * k.f.array() * (1.0 - k.f.array());
  dz.middleRows(2 * hd, hd) = dc.array() * k.i.array() * (1.0 - k.g.array().square());
  dz.middleRows(3 * hd, hd) = dh.array() * k.tanh_c.array() * k.o.array() * (1.0 - k.o.array());

  if (grad != nullptr) {
    grad->Wx.noalias() += dz * k.x.transpose();
    grad->Wh.noalias() += dz * k.h_prev.transpose();
    grad->b += dz.rowwise().sum();
  }
  LstmBackward out;
  out.dx = p.Wx.transpose() * dz;
  out.dh_prev = p.Wh.transpose() * dz;
  out.dc_prev = dc.cwiseProduct(k.f);
  return out;
}

double mse_loss(const Mat& pred, const Mat& target) {
  const std::span<const Mat> p(&pred, 1);
  const std::span<const Mat> t(&target, 1);
  return mse_loss(p, t);
}

double mse_loss(std::span<const Mat> pred, std::span<const Mat> target) {
  if (pred.size() != target.size()) throw DimensionError("mse_loss: sequence lengths differ");
  double sum = 0.0;
  Eigen::Index count = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    if (pred[t].rows() != target[t].rows() || pred[t].cols() != target[t].cols())
      throw DimensionError("mse_loss: element shapes differ");
    sum += (pred[t] - target[t]).squaredNorm();
    count += pred[t].size();
  }
  if (count == 0) throw std::domain_error("mse_loss: empty input");
  return sum / static_cast<double>(count);
}

std::vector<Mat> mse_grad(std::span<const Mat> pred, std::span<const Mat> target) {
  if (pred.size() != target.size()) throw DimensionError("mse_grad: sequence lengths differ");
  Eigen::Index count = 0;
  for (const auto& m : pred) count += m.size();
  if (count == 0) throw std::domain_error("mse_grad: empty input");
  std::vector<Mat> out;
  out.reserve(pred.size());
  const double scale = 2.0 / static_cast<double>(count);
  for (std::size_t t = 0; t < pred.size(); ++t) out.push_back(scale * (pred[t] - target[t]));
  return out;
}

void Optimizer::reset() {
  steps_ = 0;
  first_.clear();
  second_.clear();
}

void Optimizer::step(std::span<const ParamSlot> slots) {
  for (std::size_t k = 0; k < slots.size(); ++k) {
    if (slots[k].value.size() != slots[k].grad.size())
      throw DimensionError(fmt::format("optimizer: slot {} gradient size mismatch", k));
    for (std::size_t i = 0; i < slots[k].grad.size(); ++i) {
      if (!std::isfinite(slots[k].grad[i]))
        throw NumericError(fmt::format("optimizer: non-finite gradient in slot {} at index {} ({})",
                                       k, i, slots[k].grad[i]));
    }
  }
  if (first_.empty()) {
    for (const auto& s : slots) {
      first_.push_back(Vec::Zero(static_cast<Eigen::Index>(s.value.size())));
      if (cfg_.kind == OptimizerKind::Adam)
        second_.push_back(Vec::Zero(static_cast<Eigen::Index>(s.value.size())));
    }
  } else {
    if (first_.size() != slots.size())
      throw DimensionError("optimizer: number of parameter slots changed between steps");
    for (std::size_t k = 0; k < slots.size(); ++k)
      if (static_cast<std::size_t>(first_[k].size()) != slots[k].value.size())
        throw DimensionError(fmt::format("optimizer: slot {} changed size between steps", k));
  }

  ++steps_;
  const double lr = cfg_.learning_rate;
  if (cfg_.kind == OptimizerKind::Adam) {
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < slots.size(); ++k) {
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < slots[k].value.size(); ++i) {
        const double g = slots[k].grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        slots[k].value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    }
  } else {
    for (std::size_t k = 0; k < slots.size(); ++k) {
      auto& vel = first_[k];
      for (std::size_t i = 0; i < slots[k].value.size(); ++i) {
        vel[i] = cfg_.momentum * vel[i] + lr * slots[k].grad[i];
        slots[k].value[i] -= vel[i];
      }
    }
  }
}

}  // namespace pbal::nn

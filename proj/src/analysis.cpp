#include "pbal/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

namespace pbal {

std::vector<double> zx_offset_removed(const TrialRecord& trial) {
  std::vector<double> z;
  if (trial.states.empty()) return z;
  const double origin = trial.states.front().z.x();
  for (const auto& s : trial.states) z.push_back(s.z.x() - origin);
  return z;
}

double metric_Ez(std::span<const TrialRecord> trials) {
  if (trials.empty()) throw std::invalid_argument("E_z needs at least one trial");
  double total = 0.0;
  for (const auto& trial : trials) {
    if (trial.size() != static_cast<std::size_t>(kTrialTicks))
      throw std::invalid_argument(fmt::format("E_z: trial '{}' has {} ticks, expected {}",
                                              trial.condition, trial.size(), kTrialTicks));
    for (double z : zx_offset_removed(trial)) total += std::abs(z);
  }
  return total / static_cast<double>(trials.size());
}

std::vector<double> delta_f_norms(const TrialRecord& trial) {
  std::vector<double> out;
  for (std::size_t t = 1; t < trial.size(); ++t)
    out.push_back((trial.states[t].f - trial.states[t - 1].f).norm());
  return out;
}

double metric_Ef(const TrialRecord& trial) {
  if (trial.size() < 2) throw std::invalid_argument("E_f needs at least two ticks");
  const auto d = delta_f_norms(trial);
  double sq = 0.0;
  for (double v : d) sq += v * v;
  return std::sqrt(sq / static_cast<double>(d.size()));
}

double rms_delta_u(const TrialRecord& trial) {
  if (trial.commands.size() < 2) throw std::invalid_argument("RMS(du) needs at least two ticks");
  double sq = 0.0;
  for (std::size_t t = 1; t < trial.commands.size(); ++t)
    sq += std::pow(trial.commands[t] - trial.commands[t - 1], 2);
  return std::sqrt(sq / static_cast<double>(trial.commands.size() - 1));
}

OvershootReport overshoot(std::span<const double> zx) {
  OvershootReport r;
  std::size_t i = 0;
  while (i < zx.size() && zx[i] == 0.0) ++i;
  if (i == zx.size()) return r;
  const double sign = zx[i] > 0.0 ? 1.0 : -1.0;
  double first = 0.0;
  for (; i < zx.size() && sign * zx[i] >= 0.0; ++i) first = std::max(first, sign * zx[i]);
  double second = 0.0;
  for (; i < zx.size(); ++i) second = std::max(second, -sign * zx[i]);
  r.first_peak = sign * first;
  r.second_peak = second;
  r.ratio = first > 0.0 ? second / first : 0.0;
  return r;
}

std::vector<double> mean_zx(std::span<const TrialRecord> trials) {
  if (trials.empty()) return {};
  std::vector<double> mean(trials.front().size(), 0.0);
  for (const auto& trial : trials) {
    if (trial.size() != mean.size()) throw std::invalid_argument("mean_zx: trials differ in length");
    const auto z = zx_offset_removed(trial);
    for (std::size_t t = 0; t < z.size(); ++t) mean[t] += z[t];
  }
  for (auto& v : mean) v /= static_cast<double>(trials.size());
  return mean;
}

namespace {

void jacobi_eigen(Mat a, Vec& values, Mat& vectors) {
  const auto n = a.rows();
  vectors = Mat::Identity(n, n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off <= 1e-30 * std::max(1.0, a.squaredNorm())) break;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = 0.5 * std::atan2(2.0 * a(p, q), a(q, q) - a(p, p));
        const double c = std::cos(theta), s = std::sin(theta);
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = vectors(k, p), vkq = vectors(k, q);
          vectors(k, p) = c * vkp - s * vkq;
          vectors(k, q) = s * vkp + c * vkq;
        }
      }
  }
  values = a.diagonal();
}

}  // namespace

void symmetric_eigen(const Mat& a, Vec& values, Mat& vectors) {
  if (a.rows() != a.cols()) throw std::invalid_argument("symmetric_eigen: matrix is not square");
  const auto n = a.rows();
  if (n == 2) {
    const double p = a(0, 0), q = a(1, 1), b = 0.5 * (a(0, 1) + a(1, 0));
    const double theta = 0.5 * std::atan2(2.0 * b, p - q);
    const double c = std::cos(theta), s = std::sin(theta);
    values.resize(2);
    values << p * c * c + 2.0 * b * s * c + q * s * s, p * s * s - 2.0 * b * s * c + q * c * c;
    vectors.resize(2, 2);
    vectors << c, -s, s, c;
  } else {
    jacobi_eigen(a, values, vectors);
  }
  // Descending order.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return values[i] > values[j]; });
  Vec v(n);
  Mat m(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    v[k] = values[order[k]];
    m.col(k) = vectors.col(order[k]);
  }
  values = v;
  vectors = m;
}

Projection pca_project(std::span<const PbEntry> pbs, int k) {
  if (pbs.size() < 2) throw std::invalid_argument("PCA needs at least two points");
  const auto d = pbs.front().p.size();
  const auto n = static_cast<Eigen::Index>(pbs.size());
  Mat x(n, d);
  Projection out;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (pbs[i].p.size() != d) throw std::invalid_argument("PCA: points differ in dimension");
    x.row(i) = pbs[i].p.transpose();
    out.labels.push_back(pbs[i].label);
  }
  const Eigen::Index dims = std::min<Eigen::Index>(k, d);
  x.rowwise() -= x.colwise().mean();
  const Mat cov = x.transpose() * x / static_cast<double>(n);

  if (cov.cwiseAbs().maxCoeff() == 0.0) {
    out.coords = Mat::Zero(n, dims);
    out.components = Mat::Identity(d, dims);
    out.variance = Vec::Zero(dims);
    return out;
  }
  Vec values;
  Mat vectors;
  symmetric_eigen(cov, values, vectors);
  out.components = vectors.leftCols(dims);
  for (Eigen::Index c = 0; c < dims; ++c) {
    Eigen::Index arg = 0;
    for (Eigen::Index r = 1; r < d; ++r)
      if (std::abs(out.components(r, c)) > std::abs(out.components(arg, c)) + 1e-12) arg = r;
    if (out.components(arg, c) < 0.0) out.components.col(c) *= -1.0;
  }
  out.variance = values.head(dims);
  out.coords = x * out.components;
  return out;
}

}  // namespace pbal

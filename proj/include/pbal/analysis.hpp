#pragma once

// Trial metrics and PCA of parametric-bias sets.

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pbal/dpmpb.hpp"
#include "pbal/types.hpp"

namespace pbal {

inline constexpr int kTrialTicks = 30;

/// One post-disturbance window: ticks[0] is sensed at disturbance onset.
struct TrialRecord {
  std::string condition;
  std::vector<double> t;
  std::vector<SensorState> states;
  std::vector<double> commands;

  std::size_t size() const { return states.size(); }
};

/// z_x with the trial's first sample subtracted.
std::vector<double> zx_offset_removed(const TrialRecord& trial);

/// Mean over trials of sum_t |z_x(t) - z_x(0)| over 30 ticks. Throws
/// std::invalid_argument for an empty set or a trial of the wrong length.
double metric_Ez(std::span<const TrialRecord> trials);

/// RMS over ticks of ||f_t - f_{t-1}||. Needs at least two ticks.
double metric_Ef(const TrialRecord& trial);

/// ||f_t - f_{t-1}|| for t = 1..T-1.
std::vector<double> delta_f_norms(const TrialRecord& trial);

/// RMS over ticks of u_t - u_{t-1}.
double rms_delta_u(const TrialRecord& trial);

struct OvershootReport {
  double first_peak = 0.0;     // signed, largest |z_x| before the first sign change
  double second_peak = 0.0;    // largest excursion of the opposite sign afterwards, >= 0
  double ratio = 0.0;          // second_peak / |first_peak|
};

/// Inspects an offset-removed z_x series.
OvershootReport overshoot(std::span<const double> zx);

/// Element-wise mean of offset-removed z_x over trials of equal length.
std::vector<double> mean_zx(std::span<const TrialRecord> trials);

struct Projection {
  std::vector<std::string> labels;
  Mat coords;      // n x k
  Mat components;  // d x k, unit columns
  Vec variance;    // k eigenvalues, descending
};

/// Symmetric eigen-decomposition, eigenvalues descending. Closed form for
/// 2x2, cyclic Jacobi otherwise.
void symmetric_eigen(const Mat& a, Vec& values, Mat& vectors);

/// Mean-centers the PBs and projects them on the top `k` principal axes.
/// Each axis is signed so its largest-magnitude loading is positive. A
/// rank-0 set maps every point to the origin.
Projection pca_project(std::span<const PbEntry> pbs, int k = 2);

}  // namespace pbal

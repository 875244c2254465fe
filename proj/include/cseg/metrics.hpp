#pragma once

#include <array>
#include <string>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

// Dice over binary masks (nonzero = foreground); both masks empty -> 1.
double dice(const Tensor& pred, const Tensor& gt);

struct SurfaceDistance {
  double mm = 0.0;
  bool empty_sentinel = false;  // set when either mask has no foreground
};

// 95th percentile (linear interpolation) of the pooled symmetric
// surface-to-surface nearest distances in physical units. The surface is the
// set of foreground voxels with a face-adjacent background neighbor
// (6-connectivity, out-of-volume counts as background). An empty mask yields
// the volume diagonal as a flagged sentinel.
SurfaceDistance hd95(const Tensor& pred, const Tensor& gt, std::array<double, 3> spacing_mm);

// Mean of the same pooled symmetric distance set.
SurfaceDistance asd(const Tensor& pred, const Tensor& gt, std::array<double, 3> spacing_mm);

// Relative DSC drop in percent, floored at 0. snapshot must be positive.
double forgetting_rate(double snapshot_dsc, double current_dsc);

struct MetricRow {
  int step = 0;
  int task = 0;
  int cls = 0;       // global class id; 0 in aggregate rows
  std::string scope;  // "task" or "merged"
  double dsc = 0.0;
  double hd95_mm = 0.0;
  double asd_mm = 0.0;
  double forget_pct = 0.0;
};

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::string& path);

}  // namespace cseg

#pragma once

#include <array>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

// Per-task fractions of labeled-organ bounding-box volume falling inside each
// body part (remainder = outside-body coverage), averaged over samples, plus
// the statistics driving the smoothing sigmas.
struct BodyPartDistribution {
  std::vector<double> fractions;
  std::array<double, 3> avg_bbox_extent{0.0, 0.0, 0.0};  // voxels per axis
  int n_samples_used = 0;
};

// labels[i] and bp_maps[i] are (D,H,W); bp value -1 marks outside-body.
// Samples without any labeled voxel are skipped with a warning on stderr.
BodyPartDistribution compute_distribution(const std::vector<const Tensor*>& labels,
                                          const std::vector<const Tensor*>& bp_maps, int n_parts);

// Mean equivalent diameter (6V/pi)^(1/3) over masks with nonzero anomaly
// volume; 0 when no mask has an anomaly.
double anomaly_equivalent_diameter(const std::vector<const Tensor*>& anomaly_masks);

// Separable Gaussian smoothing, kernel truncated at 3 sigma and renormalized
// (per position, so constant maps stay constant); sigma 0 on an axis is the
// identity along that axis.
Tensor gaussian_smooth(const Tensor& map, std::array<double, 3> sigma_voxels);

enum class WeightingForm {
  Final,  // M = J - 1/2 (J - P + eps ⊙ P); confident corner -> 1
  Draft,  // M = 1/2 (J - P + eps ⊙ P);     confident corner -> 0
};

// Elementwise weighting map from the rasterized body-part coverage P and the
// smoothed anomaly map.
Tensor weighting_map(const Tensor& coverage, const Tensor& anomaly, WeightingForm form = WeightingForm::Final);

// H = -x log x with x = clamp(M ⊙ Y, 1e-12, 1); H in [0, 1/e].
Tensor confidence_map(const Tensor& weight, const Tensor& prediction_confidence);

struct MergeContext {
  int dataset_id = 0;
  Tensor pred_class_global;  // (D,H,W) global class ids, 0 = background
  Tensor conf_entropy;       // (D,H,W) H^t
};

struct MergeResult {
  Tensor labels;                          // (D,H,W) global ids
  std::vector<int> dataset_ids;           // sorted ids, aligned with win_counts
  std::vector<std::int64_t> win_counts;   // voxels won per task
};

// Per voxel: among tasks predicting foreground, pick the smallest entropy
// (ties to the lowest dataset id); no foreground anywhere -> background.
MergeResult merge_predictions(const std::vector<MergeContext>& contexts);

// Rasterize coverage fractions over a body-part map (outside-body voxels get
// coverage 0), then smooth with sigma = avg bbox extent / 2 per axis.
Tensor rasterize_coverage(const BodyPartDistribution& dist, const Tensor& bp_map, bool smooth = true);

}  // namespace cseg

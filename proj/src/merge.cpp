#include "cseg/merge.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>

namespace cseg {

BodyPartDistribution compute_distribution(const std::vector<const Tensor*>& labels,
                                          const std::vector<const Tensor*>& bp_maps, int n_parts) {
  if (labels.size() != bp_maps.size()) throw ShapeError("compute_distribution: list length mismatch");
  BodyPartDistribution out;
  out.fractions.assign(static_cast<std::size_t>(n_parts), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Tensor& lbl = *labels[i];
    const Tensor& bp = *bp_maps[i];
    if (!lbl.same_shape(bp)) throw ShapeError("compute_distribution: map extents differ");
    const int D = lbl.extent(0), H = lbl.extent(1), W = lbl.extent(2);
    int d0 = D, d1 = -1, h0 = H, h1 = -1, w0 = W, w1 = -1;
    for (int d = 0; d < D; ++d)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
          if (lbl.at3(d, h, w) != 0.0f) {
            d0 = std::min(d0, d);
            d1 = std::max(d1, d);
            h0 = std::min(h0, h);
            h1 = std::max(h1, h);
            w0 = std::min(w0, w);
            w1 = std::max(w1, w);
          }
    if (d1 < 0) {
      std::cerr << "compute_distribution: sample " << i << " has no labeled voxels, skipped\n";
      continue;
    }
    std::vector<double> counts(static_cast<std::size_t>(n_parts), 0.0);
    double total = 0.0;
    for (int d = d0; d <= d1; ++d)
      for (int h = h0; h <= h1; ++h)
        for (int w = w0; w <= w1; ++w) {
          total += 1.0;
          const int p = static_cast<int>(bp.at3(d, h, w));
          if (p >= 0 && p < n_parts) counts[static_cast<std::size_t>(p)] += 1.0;
        }
    for (int p = 0; p < n_parts; ++p) out.fractions[static_cast<std::size_t>(p)] += counts[static_cast<std::size_t>(p)] / total;
    out.avg_bbox_extent[0] += d1 - d0 + 1;
    out.avg_bbox_extent[1] += h1 - h0 + 1;
    out.avg_bbox_extent[2] += w1 - w0 + 1;
    ++out.n_samples_used;
  }
  if (out.n_samples_used > 0) {
    for (auto& f : out.fractions) f /= out.n_samples_used;
    for (auto& e : out.avg_bbox_extent) e /= out.n_samples_used;
  }
  return out;
}

double anomaly_equivalent_diameter(const std::vector<const Tensor*>& anomaly_masks) {
  double sum = 0.0;
  int n = 0;
  for (const Tensor* m : anomaly_masks) {
    std::int64_t vol = 0;
    for (std::int64_t i = 0; i < m->numel(); ++i) vol += (*m)[i] != 0.0f;
    if (vol == 0) continue;
    sum += std::cbrt(6.0 * static_cast<double>(vol) / 3.14159265358979323846);
    ++n;
  }
  return n > 0 ? sum / n : 0.0;
}

namespace {

// One smoothing pass along a single axis with a per-position renormalized
// truncated Gaussian.
void smooth_axis(const Tensor& in, Tensor& out, int axis, double sigma) {
  const int D = in.extent(0), H = in.extent(1), W = in.extent(2);
  if (sigma <= 0.0) {
    out = in;
    return;
  }
  const int radius = static_cast<int>(std::ceil(3.0 * sigma - 1e-9));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (int k = -radius; k <= radius; ++k)
    kernel[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * (k * k) / (sigma * sigma));
  const int extent = axis == 0 ? D : axis == 1 ? H : W;
  for (int d = 0; d < D; ++d)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        double acc = 0.0, norm = 0.0;
        const int pos = axis == 0 ? d : axis == 1 ? h : w;
        const int lo = std::max(-radius, -pos), hi = std::min(radius, extent - 1 - pos);
        for (int k = lo; k <= hi; ++k) {
          const double kw = kernel[static_cast<std::size_t>(k + radius)];
          const float v = axis == 0 ? in.at3(d + k, h, w) : axis == 1 ? in.at3(d, h + k, w) : in.at3(d, h, w + k);
          acc += kw * v;
          norm += kw;
        }
        out.at3(d, h, w) = static_cast<float>(acc / norm);
      }
}

}  // namespace

Tensor gaussian_smooth(const Tensor& map, std::array<double, 3> sigma_voxels) {
  if (map.rank() != 3) throw ShapeError("gaussian_smooth expects a rank-3 map");
  for (double s : sigma_voxels)
    if (s < 0.0) throw ConfigError("gaussian_smooth sigma must be >= 0");
  Tensor a = map, b(map.shape());
  smooth_axis(a, b, 0, sigma_voxels[0]);
  smooth_axis(b, a, 1, sigma_voxels[1]);
  smooth_axis(a, b, 2, sigma_voxels[2]);
  return b;
}

Tensor weighting_map(const Tensor& coverage, const Tensor& anomaly, WeightingForm form) {
  if (!coverage.same_shape(anomaly)) throw ShapeError("weighting_map: extents differ");
  for (std::int64_t i = 0; i < coverage.numel(); ++i)
    if (coverage[i] < 0.0f || coverage[i] > 1.0f || anomaly[i] < 0.0f || anomaly[i] > 1.0f)
      throw Error("weighting_map inputs must lie in [0,1]");
  Tensor m(coverage.shape());
  for (std::int64_t i = 0; i < m.numel(); ++i) {
    const float inner = 0.5f * (1.0f - coverage[i] + anomaly[i] * coverage[i]);
    m[i] = form == WeightingForm::Final ? 1.0f - inner : inner;
  }
  return m;
}

Tensor confidence_map(const Tensor& weight, const Tensor& prediction_confidence) {
  if (!weight.same_shape(prediction_confidence)) throw ShapeError("confidence_map: extents differ");
  Tensor h(weight.shape());
  for (std::int64_t i = 0; i < h.numel(); ++i) {
    double x = static_cast<double>(weight[i]) * static_cast<double>(prediction_confidence[i]);
    x = std::min(1.0, std::max(1e-12, x));
    h[i] = static_cast<float>(-x * std::log(x));
  }
  return h;
}

MergeResult merge_predictions(const std::vector<MergeContext>& contexts) {
  if (contexts.empty()) throw Error("merge_predictions: empty context list");
  std::vector<const MergeContext*> sorted;
  for (const auto& c : contexts) sorted.push_back(&c);
  std::sort(sorted.begin(), sorted.end(),
            [](const MergeContext* a, const MergeContext* b) { return a->dataset_id < b->dataset_id; });
  const auto& shape = sorted[0]->pred_class_global.shape();
  for (const auto* c : sorted)
    if (c->pred_class_global.shape() != shape || c->conf_entropy.shape() != shape)
      throw ShapeError("merge_predictions: context extents differ");

  MergeResult out;
  out.labels = Tensor(shape);
  out.win_counts.assign(sorted.size(), 0);
  for (const auto* c : sorted) out.dataset_ids.push_back(c->dataset_id);

  const std::int64_t n = out.labels.numel();
  for (std::int64_t j = 0; j < n; ++j) {
    int best = -1;
    float best_h = std::numeric_limits<float>::infinity();
    for (std::size_t t = 0; t < sorted.size(); ++t) {
      if (sorted[t]->pred_class_global[j] == 0.0f) continue;
      const float h = sorted[t]->conf_entropy[j];
      if (h < best_h) {
        best_h = h;
        best = static_cast<int>(t);
      }
    }
    if (best >= 0) {
      out.labels[j] = sorted[static_cast<std::size_t>(best)]->pred_class_global[j];
      ++out.win_counts[static_cast<std::size_t>(best)];
    }
  }
  return out;
}

Tensor rasterize_coverage(const BodyPartDistribution& dist, const Tensor& bp_map, bool smooth) {
  Tensor cov(bp_map.shape());
  for (std::int64_t i = 0; i < bp_map.numel(); ++i) {
    const int p = static_cast<int>(bp_map[i]);
    cov[i] = (p >= 0 && p < static_cast<int>(dist.fractions.size()))
                 ? static_cast<float>(dist.fractions[static_cast<std::size_t>(p)])
                 : 0.0f;
  }
  if (!smooth) return cov;
  return gaussian_smooth(
      cov, {dist.avg_bbox_extent[0] / 2.0, dist.avg_bbox_extent[1] / 2.0, dist.avg_bbox_extent[2] / 2.0});
}

}  // namespace cseg

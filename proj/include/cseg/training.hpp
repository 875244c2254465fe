#pragma once

#include <array>
#include <map>
#include <set>
#include <vector>

#include "cseg/losses.hpp"
#include "cseg/metrics.hpp"
#include "cseg/phantom.hpp"
#include "cseg/segnet.hpp"

namespace cseg {

struct OptimOptions {
  double lr0 = 0.01;
  double momentum = 0.99;
  bool nesterov = true;
  double poly_power = 0.9;
  int batch = 2;
  bool augment = true;
};

// global id -> local decoder channel (0 stays background). Channel i+1 maps
// to subset[i].
std::vector<int> local_channel_map(const std::vector<int>& subset, int n_global);

// Stack samples into a training batch; labels are remapped to local channels.
struct Batch {
  Tensor volumes;  // (B,1,D,H,W)
  Tensor labels;   // (B,1,D,H,W) local ids
};
Batch make_batch(const std::vector<const PhantomSample*>& samples, const std::vector<int>& local_of_global);

// One decoder-only training run against a (usually frozen) encoder. Returns
// the per-epoch mean training loss.
std::vector<double> train_decoder(Encoder& enc, Decoder& dec, const PhantomDataset& ds,
                                  const std::vector<int>& indices, int epochs, const OptimOptions& opt, Rng rng);

// dice_ce fine-tuning entry shared with the pruning stage (identical loop,
// caller picks the learning rate).

// Per-voxel argmax under global ids for one volume.
Tensor predict_labels(Encoder& enc, Decoder& dec, const Tensor& volume, const std::vector<int>& subset);

// Mean over the subset's classes of dice(pred==c, gt==c) averaged over
// samples.
double mean_foreground_dsc(Encoder& enc, Decoder& dec, const PhantomDataset& ds, const std::vector<int>& indices);

struct ClassMetrics {
  int cls = 0;
  double dsc = 0.0, hd95_mm = 0.0, asd_mm = 0.0;
};
// Per-class metrics of a label-map predictor over the given samples: per
// (sample, class) metrics averaged over samples.
std::vector<ClassMetrics> evaluate_class_metrics(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts,
                                                 const std::vector<int>& classes, std::array<double, 3> spacing);

}  // namespace cseg

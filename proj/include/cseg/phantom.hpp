#pragma once

#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

// Global class list shared by all datasets plus each dataset's labeled
// subset. Background is id 0 and never part of a subset.
struct ClassRegistry {
  std::vector<std::string> names;  // index = global id; names[0] == "background"
  std::map<int, std::vector<int>> subsets;  // dataset id -> sorted labeled class ids

  int num_foreground() const { return static_cast<int>(names.size()) - 1; }
  const std::vector<int>& subset(int dataset_id) const;
  std::vector<int> overlap(int dataset_a, int dataset_b) const;
  // Classes of `dataset_id` overlapping with any other registered dataset.
  std::set<int> overlap_with_any(int dataset_id) const;
  void validate() const;
};

struct OrganDef {
  int class_id = 0;
  int body_part = 0;
  std::array<double, 2> radius_d{2.0, 3.0};
  std::array<double, 2> radius_hw{3.0, 5.5};
  std::array<double, 2> intensity{0.5, 0.5};
};

struct WorldSpec {
  std::array<int, 3> extents{32, 32, 32};
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  int n_body_parts = 4;
  std::vector<OrganDef> organs;
  ClassRegistry registry;
};

// One dataset's generation recipe. All datasets share the world (every organ
// is rendered in every sample); a dataset only labels its subset.
struct PhantomSpec {
  WorldSpec world;
  int dataset_id = 1;
  std::string name;
  std::vector<int> labeled_subset;
  double anomaly_rate = 0.0;
  std::array<double, 2> anomaly_radius{1.2, 2.2};
  std::vector<int> anomaly_host_classes;
  int sample_count = 16;
  std::uint64_t seed = 0;
};

struct PhantomSample {
  Tensor image;       // (D,H,W) intensities
  Tensor labels;      // (D,H,W) values in {0} ∪ labeled subset
  Tensor body_parts;  // (D,H,W) part index, -1 outside the body
  Tensor anomaly;     // (D,H,W) 0/1 mask
};

struct SplitIndices {
  std::vector<int> train, val, test;
};

struct PhantomDataset {
  PhantomSpec spec;
  std::vector<PhantomSample> samples;
  SplitIndices split;
};

// Deterministic per (spec.seed, sample index); organs are smooth-intensity
// ellipsoids over a noisy tissue/air background.
PhantomDataset generate_dataset(const PhantomSpec& spec);
PhantomSample generate_sample(const PhantomSpec& spec, int index);

// Disjoint exhaustive split by largest-remainder apportionment of shuffled
// indices. Throws if a positive ratio rounds to an empty split.
SplitIndices split_dataset(int n_samples, std::array<double, 3> ratios, std::uint64_t seed);

struct AugmentParams {
  bool flip_width = false;
  double intensity_scale = 1.0;
  double noise_sd = 0.0;
};

AugmentParams sample_augment_params(Rng& rng);
// Geometry transforms apply to image and all maps; noise and intensity scale
// touch the image only.
PhantomSample augment_with(const PhantomSample& s, const AugmentParams& p, Rng noise_rng);
PhantomSample augment(const PhantomSample& s, std::uint64_t seed);

// Body-part band map of the world (same for every sample).
Tensor make_body_part_map(const WorldSpec& world);

// On-disk layout: <dir>/manifest (JSON) plus {id}.img/.lbl/.bp/.anom tensors.
void save_dataset(const std::string& dir, const PhantomDataset& d);
PhantomDataset load_dataset(const std::string& dir);

// The default desk-scale world: 4 stacked body parts, 12 global classes,
// 4 datasets (24/16/16/16 samples) with 2 classes shared between datasets 1
// and 2 and dataset 4 labeling a single shared class with anomalies.
WorldSpec default_world();
std::vector<PhantomSpec> default_dataset_specs(std::uint64_t master_seed);

}  // namespace cseg

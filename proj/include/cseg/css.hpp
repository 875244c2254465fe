#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cseg/decoder_opt.hpp"
#include "cseg/merge.hpp"
#include "cseg/training.hpp"

namespace cseg {

struct EpochBudgets {
  int base = 60;
  int nas = 30;
  int retrain = 30;
  int distill = 80;
  int finetune = 15;
  int baseline_step = 30;
};

struct CssOptions {
  OptimOptions optim;          // main training (lr 0.01, momentum 0.99, nesterov)
  OptimOptions distill_optim;  // feature matching (momentum 0.9: MSE oscillates at 0.99)
  double finetune_lr = 0.001;
  double aux_weight = 0.5;
  double tau = 0.01;
  double arch_lr = 0.1;
  EpochBudgets epochs;
  std::vector<int> encoder_widths = {8, 16, 32, 64};
  bool prune = true;
  WeightingForm weighting = WeightingForm::Final;

  CssOptions() {
    distill_optim.momentum = 0.9;
    distill_optim.batch = 1;
    distill_optim.augment = false;
  }
};

// One continual step's artifacts. The snapshot is taken on the test split at
// step completion and never recomputed.
struct TaskState {
  int dataset_id = 0;
  std::vector<int> subset;
  Decoder decoder;
  std::vector<KernelKind> nas_assignment;
  std::uint32_t prune_mask = 0;
  bool no_prune = false;
  PruneReport prune_report;
  BodyPartDistribution distribution;
  std::vector<ClassMetrics> snapshot;
};

struct BaseResult {
  Encoder encoder;
  AuxHeads aux;
  TaskState task;
  double anomaly_sigma = 0.0;
};

// Joint encoder+decoder+aux training on the base dataset with dice_ce on the
// segmentation head and weighted dice_ce terms on the body-part and anomaly
// heads; the encoder (and aux heads) are frozen afterwards.
BaseResult train_base(const PhantomDataset& d1, const CssOptions& opt, std::uint64_t seed);

// One continual step: NAS over the kernel set, retrain, block distillation,
// exhaustive path enumeration under tau, fine-tune. Accepts exactly one
// dataset handle; prior task states are never touched.
TaskState continual_step(Encoder& frozen_encoder, const PhantomDataset& dt, const CssOptions& opt,
                         std::uint64_t seed);

// Snapshot-style evaluation of a task's decoder on its test split.
std::vector<ClassMetrics> evaluate_task(Encoder& enc, TaskState& task, const PhantomDataset& ds);

// ---------------------------------------------------------------------------
// Shared-model baselines (forgetting comparators)

enum class BaselineMode { Finetune, Mib, Plop, Ilt };
BaselineMode baseline_mode_from_name(const std::string& s);
const char* baseline_mode_name(BaselineMode m);

struct BaselineModel {
  Encoder encoder;
  Decoder decoder;             // head over the full global registry
  std::vector<int> seen;       // global class ids learned so far
  std::vector<std::uint8_t> active_mask() const;  // channel mask incl. background
  int n_global = 0;
};

// Trains the shared model on the base dataset (ilt freezes the encoder
// afterwards, matching the frozen-encoder re-implementation).
BaselineModel baseline_init(const PhantomDataset& d1, BaselineMode mode, const CssOptions& opt, std::uint64_t seed);

// Updates the single shared model in place with the mode's losses.
void baseline_step(BaselineModel& model, const PhantomDataset& dt, BaselineMode mode, const CssOptions& opt,
                   std::uint64_t seed);

std::vector<ClassMetrics> evaluate_baseline(BaselineModel& model, const PhantomDataset& ds);

// ---------------------------------------------------------------------------
// Full-framework state on disk:
//   encoder.ckpt, aux.ckpt, state.json, task_<t>/decoder.ckpt,
//   task_<t>/snapshot.csv, task_<t>/meta.json

struct Framework {
  Encoder encoder;
  AuxHeads aux;
  double anomaly_sigma = 0.0;
  std::vector<int> plan;  // dataset ids in learning order
  std::vector<TaskState> tasks;
  std::uint64_t master_seed = 0;
};

void save_state(const std::string& dir, Framework& fw);
Framework load_state(const std::string& dir);
bool state_has_base(const std::string& dir);
int state_completed_steps(const std::string& dir);

void write_snapshot_csv(const std::string& path, const std::vector<ClassMetrics>& rows);
std::vector<ClassMetrics> read_snapshot_csv(const std::string& path);

// ---------------------------------------------------------------------------
// Merge-time plumbing

// Anomaly probability map of a volume through the aux head, smoothed with
// g(anomaly_sigma).
Tensor anomaly_probability(Encoder& enc, AuxHeads& aux, const Tensor& volume, double anomaly_sigma);

// Body-part map predicted by the aux head (argmax over parts).
Tensor predict_body_parts(Encoder& enc, AuxHeads& aux, const Tensor& volume);

// Build one task's merge context for a volume. Pass the ground-truth body
// part map to bypass the aux prediction (tests); anomaly is the shared
// smoothed map.
MergeContext make_merge_context(Encoder& enc, TaskState& task, const Tensor& volume, const Tensor& bp_map,
                                const Tensor& anomaly_smoothed, WeightingForm form);

}  // namespace cseg

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cseg/training.hpp"

namespace cseg {

// Relaxed kernel search: each decoding block runs all four kernel-kind
// candidates in parallel and mixes them with softmax(arch logits). The
// mixture is differentiable in both the candidates and the logits.
template <typename S>
class MixedBlockT {
 public:
  MixedBlockT() = default;
  MixedBlockT(int in_c, int out_c, Rng rng) {
    for (std::size_t k = 0; k < 4; ++k)
      branches_[k] = make_decoding_block<S>(kAllKernelKinds[k], in_c, out_c, rng.fork(k));
    logits_.value = TensorT<S>({4});
    logits_.init_buffers();
  }

  std::array<double, 4> mixture() const {
    std::array<double, 4> a{};
    double mx = -1e300;
    for (int k = 0; k < 4; ++k) mx = std::max(mx, static_cast<double>(logits_.value[k]));
    double sum = 0.0;
    for (int k = 0; k < 4; ++k) {
      a[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(logits_.value[k]) - mx);
      sum += a[static_cast<std::size_t>(k)];
    }
    for (auto& v : a) v /= sum;
    return a;
  }

  KernelKind selected() const {
    const auto a = mixture();
    std::size_t best = 0;
    for (std::size_t k = 1; k < 4; ++k)
      if (a[k] > a[best]) best = k;
    return kAllKernelKinds[best];
  }

  TensorT<S> forward(const TensorT<S>& x, Mode mode) {
    const auto a = mixture();
    TensorT<S> y;
    if (mode == Mode::Train) branch_out_.clear();
    for (std::size_t k = 0; k < 4; ++k) {
      TensorT<S> yk = branches_[k].forward(x, mode);
      if (k == 0) {
        y = TensorT<S>(yk.shape());
      }
      y.array() += static_cast<S>(a[k]) * yk.array();
      if (mode == Mode::Train) branch_out_.push_back(std::move(yk));
    }
    return y;
  }

  TensorT<S> backward(const TensorT<S>& grad_out) {
    if (branch_out_.size() != 4) throw Error("mixed block backward without cached forward");
    const auto a = mixture();
    std::array<double, 4> score{};
    TensorT<S> gin;
    for (std::size_t k = 0; k < 4; ++k) {
      score[k] = (grad_out.array().template cast<double>() * branch_out_[k].array().template cast<double>()).sum();
      TensorT<S> gk(grad_out.shape());
      gk.array() = grad_out.array() * static_cast<S>(a[k]);
      TensorT<S> gi = branches_[k].backward(gk);
      if (k == 0)
        gin = std::move(gi);
      else
        gin.array() += gi.array();
    }
    double mean_score = 0.0;
    for (std::size_t k = 0; k < 4; ++k) mean_score += a[k] * score[k];
    for (std::size_t k = 0; k < 4; ++k)
      logits_.grad[static_cast<std::int64_t>(k)] += static_cast<S>(a[k] * (score[k] - mean_score));
    branch_out_.clear();
    return gin;
  }

  std::vector<Param<S>*> branch_params() {
    std::vector<Param<S>*> out;
    for (auto& b : branches_)
      for (auto* p : b.params()) out.push_back(p);
    return out;
  }
  Param<S>& arch_logits() { return logits_; }
  const Param<S>& arch_logits() const { return logits_; }
  BlockT<S>& branch(KernelKind k) { return branches_[static_cast<std::size_t>(k)]; }

 private:
  std::array<BlockT<S>, 4> branches_;
  Param<S> logits_;
  std::vector<TensorT<S>> branch_out_;
};

using MixedBlock = MixedBlockT<float>;

// Decoder skeleton with mixed blocks, used only during the search phase.
class MixedDecoder {
 public:
  MixedDecoder() = default;
  MixedDecoder(const std::vector<int>& encoder_widths, int n_classes, Rng rng);

  Tensor forward(const std::vector<Tensor>& feats, Mode mode);
  void backward(const Tensor& grad_probs);

  std::vector<MixedBlock>& blocks() { return blocks_; }
  std::vector<Param<float>*> network_params();  // branches + head
  std::vector<Param<float>*> arch_params();
  std::vector<KernelKind> assignment() const;
  std::vector<std::array<double, 4>> mixtures() const;

 private:
  std::vector<NearestUpsample<float>> ups_;
  std::vector<MixedBlock> blocks_;
  Conv<float> head_;
  SoftmaxOverChannels<float> softmax_;
  std::vector<int> skip_channels_;
};

struct NasOptions {
  int epochs = 30;           // total search epochs
  double warmup_frac = 0.4;  // network-only warmup share
  OptimOptions net;          // network parameter updates
  double arch_lr = 0.1;      // logit updates (plain SGD semantics, momentum shared)
  int retrain_epochs = 30;
};

struct NasResult {
  std::vector<KernelKind> assignment;
  std::vector<std::array<double, 4>> final_mixtures;
  Decoder decoder;  // searched architecture retrained from scratch
  std::vector<int> retrain_train;  // 4:1 re-split used for the retraining
  std::vector<int> retrain_val;
};

// Warmup with frozen uniform arch weights, alternate network/arch updates on
// the 60/30 splits, take the per-block argmax, then retrain the searched
// decoder from scratch on a 4:1 re-split.
NasResult nas_search(Encoder& frozen_encoder, const PhantomDataset& ds, const NasOptions& opt, std::uint64_t seed);

// Teacher-student projection distillation for one decoding block on cached
// (input, output) pairs. The teacher never receives gradients.
Block distill_block(const Block& teacher, const std::vector<Tensor>& inputs, const std::vector<Tensor>& targets,
                    int epochs, const OptimOptions& opt, Rng rng);

// Per-sample decoding streams for distillation: inputs/targets of every block
// of the (frozen) teacher decoder over the listed samples.
struct BlockStreams {
  std::vector<std::vector<Tensor>> inputs;   // [block][sample]
  std::vector<std::vector<Tensor>> targets;  // [block][sample]
};
BlockStreams collect_block_streams(Encoder& enc, Decoder& teacher, const PhantomDataset& ds,
                                   const std::vector<int>& indices);

struct PruneCandidate {
  std::uint32_t mask = 0;  // bit b set = block b replaced by its student
  double dsc = 0.0;
  std::int64_t params = 0;
  bool feasible = false;
  bool selected = false;
};

struct PruneReport {
  double baseline_dsc = 0.0;
  double tau = 0.01;
  std::uint32_t selected_mask = 0;
  bool no_prune = false;  // fallback: no nonidentity mask was feasible
  std::vector<PruneCandidate> table;
};

// Builds the decoder for a candidate mask (students swapped in by value).
Decoder assemble_path(const Decoder& teacher, const std::vector<Block>& students, std::uint32_t mask);

// All 2^B candidates in mask order, each evaluated once on the validation
// samples.
std::vector<PruneCandidate> enumerate_paths(Encoder& enc, const Decoder& teacher, const std::vector<Block>& students,
                                            const PhantomDataset& ds, const std::vector<int>& val_indices);

// Feasible = DSC >= (1-tau) * baseline; pick minimal parameter count, ties by
// higher DSC then lower mask value.
PruneReport select_pruned_path(const std::vector<PruneCandidate>& candidates, double baseline_dsc, double tau);

void write_prune_report_csv(const std::string& path, const PruneReport& report, int n_blocks);

}  // namespace cseg

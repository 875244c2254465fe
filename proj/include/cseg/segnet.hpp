#pragma once

#include <map>
#include <string>
#include <vector>

#include "cseg/nn.hpp"

namespace cseg {

// A decoding/encoding block: a conv (one of the four kernel kinds) followed
// by a norm and an activation.
template <typename S>
struct BlockT {
  KernelKind kind = KernelKind::Conv3D;
  std::vector<Layer<S>> layers;

  TensorT<S> forward(const TensorT<S>& x, Mode mode) {
    TensorT<S> y = x;
    for (auto& l : layers) y = cseg::forward(l, y, mode);
    return y;
  }
  TensorT<S> backward(const TensorT<S>& grad_out) {
    TensorT<S> g = grad_out;
    for (auto it = layers.rbegin(); it != layers.rend(); ++it) g = cseg::backward(*it, g);
    return g;
  }
  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out;
    for (auto& l : layers)
      for (auto* p : layer_params(l)) out.push_back(p);
    return out;
  }
  std::vector<TensorT<S>*> state_tensors() {
    std::vector<TensorT<S>*> out;
    for (auto& l : layers)
      for (auto* t : layer_state(l)) out.push_back(t);
    return out;
  }
};

// Encoder block per level: conv3d + instance norm + leaky relu.
template <typename S>
BlockT<S> make_encoding_block(int in_c, int out_c, Rng rng) {
  BlockT<S> b;
  b.kind = KernelKind::Conv3D;
  b.layers.emplace_back(Conv<S>(KernelSpec{KernelKind::Conv3D, in_c, out_c}, rng));
  b.layers.emplace_back(InstanceNorm<S>(out_c));
  b.layers.emplace_back(LeakyReLU<S>(0.01));
  return b;
}

// Decoding block: conv of the given kernel kind + batch norm + relu. The
// PseudoP3D conv chains its two convolutions before the single nonlinearity.
template <typename S>
BlockT<S> make_decoding_block(KernelKind kind, int in_c, int out_c, Rng rng) {
  BlockT<S> b;
  b.kind = kind;
  b.layers.emplace_back(Conv<S>(KernelSpec{kind, in_c, out_c}, rng));
  b.layers.emplace_back(BatchNorm<S>(out_c));
  b.layers.emplace_back(ReLU<S>());
  return b;
}

template <typename S>
std::int64_t block_conv_weight_count(BlockT<S>& b) {
  std::int64_t n = 0;
  for (auto& l : b.layers)
    if (auto* c = std::get_if<Conv<S>>(&l)) n += c->weight_count();
  return n;
}

template <typename S>
void set_block_frozen_stats(BlockT<S>& b, bool frozen) {
  for (auto& l : b.layers)
    if (auto* bn = std::get_if<BatchNorm<S>>(&l)) bn->set_frozen_stats(frozen);
}

template <typename S>
bool block_frozen_stats(BlockT<S>& b) {
  for (auto& l : b.layers)
    if (auto* bn = std::get_if<BatchNorm<S>>(&l)) return bn->frozen_stats();
  return false;
}

template <typename S>
std::int64_t param_count(std::vector<Param<S>*> ps) {
  std::int64_t n = 0;
  for (auto* p : ps) n += p->value.numel();
  return n;
}

template <typename S>
std::uint64_t params_checksum(std::vector<Param<S>*> ps) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto* p : ps)
    h = fnv1a64(p->value.data(), static_cast<std::size_t>(p->value.numel()) * sizeof(S), h);
  return h;
}

template <typename S>
void freeze_params(std::vector<Param<S>*> ps) {
  for (auto* p : ps) p->frozen = true;
}

template <typename S>
void zero_grads(std::vector<Param<S>*> ps) {
  for (auto* p : ps) p->zero_grad();
}

// ---------------------------------------------------------------------------
// General encoder: L levels of encoding blocks with stride-2 max pooling
// between levels. forward() returns the per-level features (skip sources);
// the last entry is the deepest feature map.

template <typename S>
class EncoderT {
 public:
  EncoderT() = default;
  EncoderT(std::vector<int> widths, int in_channels, Rng rng) : widths_(std::move(widths)) {
    if (widths_.size() < 2) throw ConfigError("encoder needs at least 2 levels");
    int c = in_channels;
    for (std::size_t l = 0; l < widths_.size(); ++l) {
      blocks_.push_back(make_encoding_block<S>(c, widths_[l], rng.fork(l)));
      c = widths_[l];
      if (l + 1 < widths_.size()) pools_.emplace_back(2, 2);
    }
  }

  int levels() const { return static_cast<int>(widths_.size()); }
  const std::vector<int>& widths() const { return widths_; }
  bool frozen() const { return frozen_; }

  std::vector<TensorT<S>> forward(const TensorT<S>& x, Mode mode) {
    std::vector<TensorT<S>> feats;
    TensorT<S> cur = x;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      cur = blocks_[l].forward(cur, mode);
      feats.push_back(cur);
      if (l < pools_.size()) cur = pools_[l].forward(cur, mode);
    }
    return feats;
  }

  // grad_deepest: gradient at the deepest feature map; skip_grads[l] (may be
  // empty tensors) are added at each level's feature output.
  TensorT<S> backward(const TensorT<S>& grad_deepest, const std::vector<TensorT<S>>& skip_grads) {
    TensorT<S> g = grad_deepest;
    for (int l = levels() - 1; l >= 0; --l) {
      if (l < levels() - 1) {
        g = pools_[static_cast<std::size_t>(l)].backward(g);
      }
      if (static_cast<std::size_t>(l) < skip_grads.size() && !skip_grads[static_cast<std::size_t>(l)].empty())
        g.array() += skip_grads[static_cast<std::size_t>(l)].array();
      g = blocks_[static_cast<std::size_t>(l)].backward(g);
    }
    return g;
  }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out;
    for (auto& b : blocks_)
      for (auto* p : b.params()) out.push_back(p);
    return out;
  }

  void freeze() {
    freeze_params(params());
    frozen_ = true;
  }
  void set_frozen_flag(bool f) { frozen_ = f; }

  std::vector<TensorT<S>*> state_tensors() {
    std::vector<TensorT<S>*> out;
    for (auto& b : blocks_)
      for (auto* t : b.state_tensors()) out.push_back(t);
    return out;
  }

  std::vector<BlockT<S>>& blocks() { return blocks_; }

 private:
  std::vector<int> widths_;
  std::vector<BlockT<S>> blocks_;
  std::vector<MaxPool<S>> pools_;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Per-task decoder: levels-1 decoding blocks walking back up the pyramid
// (nearest upsample + skip concat + block), then a projection head to
// n_classes+1 channels and a channel softmax.

template <typename S>
class DecoderT {
 public:
  DecoderT() = default;
  // kinds: kernel kind per decoding block, deepest first.
  DecoderT(const std::vector<int>& encoder_widths, int n_classes, const std::vector<KernelKind>& kinds, Rng rng)
      : n_classes_(n_classes) {
    const int levels = static_cast<int>(encoder_widths.size());
    if (static_cast<int>(kinds.size()) != levels - 1)
      throw ConfigError("decoder kernel kind list must have one entry per decoding block");
    for (int b = 0; b < levels - 1; ++b) {
      const int deep_c = encoder_widths[static_cast<std::size_t>(levels - 1 - b)];
      const int skip_c = encoder_widths[static_cast<std::size_t>(levels - 2 - b)];
      ups_.emplace_back(2);
      blocks_.push_back(make_decoding_block<S>(kinds[static_cast<std::size_t>(b)], deep_c + skip_c, skip_c,
                                               rng.fork(static_cast<std::uint64_t>(b) + 1)));
    }
    head_ = Conv<S>(KernelSpec{KernelKind::Projection, encoder_widths[0], n_classes + 1}, rng.fork(1000));
  }

  int n_classes() const { return n_classes_; }
  int n_blocks() const { return static_cast<int>(blocks_.size()); }
  std::vector<KernelKind> kinds() const {
    std::vector<KernelKind> k;
    for (const auto& b : blocks_) k.push_back(b.kind);
    return k;
  }

  // Per-voxel class probabilities (n_classes+1 channels, channel 0 background).
  TensorT<S> forward(const std::vector<TensorT<S>>& feats, Mode mode) {
    TensorT<S> cur = feats.back();
    skip_channels_.clear();
    if (collect_taps_) taps_.clear();
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      TensorT<S> up = ups_[b].forward(cur, mode);
      const TensorT<S>& skip = feats[feats.size() - 2 - b];
      skip_channels_.push_back(up.extent(1));
      cur = blocks_[b].forward(concat_channels(up, skip), mode);
      if (collect_taps_) taps_.push_back(cur);
    }
    TensorT<S> logits = head_.forward(cur, mode);
    return softmax_.forward(logits, mode);
  }

  // Returns the gradient at the deepest encoder feature; skip_grads receives
  // one gradient per encoder level below the deepest (index = encoder level).
  // block_out_grads, when given, injects extra gradients at each decoding
  // block's output (feature-matching losses).
  TensorT<S> backward(const TensorT<S>& grad_probs, std::vector<TensorT<S>>& skip_grads,
                      const std::vector<TensorT<S>>* block_out_grads = nullptr) {
    skip_grads.assign(blocks_.size() + 1, TensorT<S>());
    TensorT<S> g = softmax_.backward(grad_probs);
    g = head_.backward(g);
    for (int b = static_cast<int>(blocks_.size()) - 1; b >= 0; --b) {
      if (block_out_grads && !(*block_out_grads)[static_cast<std::size_t>(b)].empty())
        g.array() += (*block_out_grads)[static_cast<std::size_t>(b)].array();
      g = blocks_[static_cast<std::size_t>(b)].backward(g);
      auto [g_up, g_skip] = split_channels(g, skip_channels_[static_cast<std::size_t>(b)]);
      // encoder level of this skip: levels-2-b
      skip_grads[blocks_.size() - 1 - static_cast<std::size_t>(b)] = std::move(g_skip);
      g = ups_[static_cast<std::size_t>(b)].backward(g_up);
    }
    return g;
  }

  void set_collect_taps(bool c) { collect_taps_ = c; }
  const std::vector<TensorT<S>>& taps() const { return taps_; }

  // Forward that also returns each decoding block's input and output, used
  // by the distillation and pruning machinery.
  struct Taps {
    std::vector<TensorT<S>> block_in;
    std::vector<TensorT<S>> block_out;
    TensorT<S> probs;
  };
  Taps forward_collect(const std::vector<TensorT<S>>& feats) {
    Taps t;
    TensorT<S> cur = feats.back();
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      TensorT<S> up = ups_[b].forward(cur, Mode::Eval);
      const TensorT<S>& skip = feats[feats.size() - 2 - b];
      TensorT<S> cat = concat_channels(up, skip);
      t.block_in.push_back(cat);
      cur = blocks_[b].forward(cat, Mode::Eval);
      t.block_out.push_back(cur);
    }
    TensorT<S> logits = head_.forward(cur, Mode::Eval);
    t.probs = softmax_.forward(logits, Mode::Eval);
    return t;
  }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out;
    for (auto& b : blocks_)
      for (auto* p : b.params()) out.push_back(p);
    for (auto* p : head_.params()) out.push_back(p);
    return out;
  }

  void freeze() { freeze_params(params()); }

  std::vector<TensorT<S>*> state_tensors() {
    std::vector<TensorT<S>*> out;
    for (auto& b : blocks_)
      for (auto* t : b.state_tensors()) out.push_back(t);
    for (auto* t : head_.state_tensors()) out.push_back(t);
    return out;
  }

  std::vector<BlockT<S>>& blocks() { return blocks_; }
  Conv<S>& head() { return head_; }
  SoftmaxOverChannels<S>& softmax() { return softmax_; }

 private:
  int n_classes_ = 0;
  std::vector<NearestUpsample<S>> ups_;
  std::vector<BlockT<S>> blocks_;
  Conv<S> head_;
  SoftmaxOverChannels<S> softmax_;
  std::vector<int> skip_channels_;
  bool collect_taps_ = false;
  std::vector<TensorT<S>> taps_;
};

// ---------------------------------------------------------------------------
// Auxiliary body-part and anomaly heads: FCN-style projection-only decoding
// paths reading every encoder level (project to the output classes, upsample,
// sum, softmax).

template <typename S>
class ProjectionHeadT {
 public:
  ProjectionHeadT() = default;
  ProjectionHeadT(const std::vector<int>& encoder_widths, int out_channels, Rng rng) : out_channels_(out_channels) {
    for (std::size_t l = 0; l < encoder_widths.size(); ++l) {
      projs_.emplace_back(KernelSpec{KernelKind::Projection, encoder_widths[l], out_channels}, rng.fork(l));
      if (l > 0) ups_.emplace_back(2);
    }
  }

  int out_channels() const { return out_channels_; }

  TensorT<S> forward(const std::vector<TensorT<S>>& feats, Mode mode) {
    // deepest-to-shallowest staged sum
    const std::size_t L = projs_.size();
    proj_out_shapes_.assign(L, {});
    TensorT<S> s = projs_[L - 1].forward(feats[L - 1], mode);
    for (std::size_t l = L - 1; l-- > 0;) {
      s = ups_[l].forward(s, mode);
      TensorT<S> p = projs_[l].forward(feats[l], mode);
      s.array() += p.array();
    }
    return softmax_.forward(s, mode);
  }

  // Gradients w.r.t. each encoder level's features.
  std::vector<TensorT<S>> backward(const TensorT<S>& grad_probs) {
    const std::size_t L = projs_.size();
    std::vector<TensorT<S>> feat_grads(L);
    TensorT<S> g = softmax_.backward(grad_probs);
    for (std::size_t l = 0; l < L - 1; ++l) {
      feat_grads[l] = projs_[l].backward(g);
      g = ups_[l].backward(g);
    }
    feat_grads[L - 1] = projs_[L - 1].backward(g);
    return feat_grads;
  }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out;
    for (auto& c : projs_)
      for (auto* p : c.params()) out.push_back(p);
    return out;
  }

  std::vector<TensorT<S>*> state_tensors() {
    std::vector<TensorT<S>*> out;
    for (auto& c : projs_)
      for (auto* t : c.state_tensors()) out.push_back(t);
    return out;
  }

  void freeze() { freeze_params(params()); }

 private:
  int out_channels_ = 0;
  std::vector<Conv<S>> projs_;
  std::vector<NearestUpsample<S>> ups_;
  SoftmaxOverChannels<S> softmax_;
  std::vector<std::vector<int>> proj_out_shapes_;
};

template <typename S>
struct AuxHeadsT {
  ProjectionHeadT<S> body_part;
  ProjectionHeadT<S> anomaly;

  std::vector<Param<S>*> params() {
    auto out = body_part.params();
    for (auto* p : anomaly.params()) out.push_back(p);
    return out;
  }
  void freeze() {
    body_part.freeze();
    anomaly.freeze();
  }
  std::vector<TensorT<S>*> state_tensors() {
    auto out = body_part.state_tensors();
    for (auto* t : anomaly.state_tensors()) out.push_back(t);
    return out;
  }
};

template <typename S>
AuxHeadsT<S> attach_aux_heads(const EncoderT<S>& encoder, int n_bodyparts, Rng rng) {
  AuxHeadsT<S> aux;
  aux.body_part = ProjectionHeadT<S>(encoder.widths(), n_bodyparts, rng.fork(1));
  aux.anomaly = ProjectionHeadT<S>(encoder.widths(), 2, rng.fork(2));
  return aux;
}

// ---------------------------------------------------------------------------

template <typename S>
EncoderT<S> build_encoder(std::vector<int> widths, std::uint64_t seed, int in_channels = 1) {
  return EncoderT<S>(std::move(widths), in_channels, Rng(seed));
}

template <typename S>
DecoderT<S> build_decoder(const EncoderT<S>& encoder, int n_classes, std::vector<KernelKind> kinds,
                          std::uint64_t seed) {
  return DecoderT<S>(encoder.widths(), n_classes, kinds, Rng(seed));
}

// End-to-end inference: volume (B,1,D,H,W) or (D,H,W) -> per-class
// probabilities. Spatial extents must be divisible by 2^(levels-1).
template <typename S>
TensorT<S> forward_segment(EncoderT<S>& encoder, DecoderT<S>& decoder, const TensorT<S>& volume) {
  TensorT<S> x = volume;
  if (x.rank() == 3) x = TensorT<S>({1, 1, x.extent(0), x.extent(1), x.extent(2)}, x.raw());
  if (x.rank() != 5) throw ShapeError("forward_segment expects rank-3 or rank-5 input");
  const int div = 1 << (encoder.levels() - 1);
  for (int a = 2; a < 5; ++a)
    if (x.extent(a) % div != 0)
      throw ShapeError("volume extents must be divisible by " + std::to_string(div));
  auto feats = encoder.forward(x, Mode::Eval);
  return decoder.forward(feats, Mode::Eval);
}

using Block = BlockT<float>;
using Encoder = EncoderT<float>;
using Decoder = DecoderT<float>;
using ProjectionHead = ProjectionHeadT<float>;
using AuxHeads = AuxHeadsT<float>;

}  // namespace cseg

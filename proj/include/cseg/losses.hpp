#pragma once

#include <set>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

template <typename S>
struct LossValueT {
  double value = 0.0;
  TensorT<S> grad;  // w.r.t. the probability tensor passed in
};

using LossValue = LossValueT<float>;

namespace loss_detail {
constexpr double kProbFloor = 1e-12;
inline double clamped_log(double p) { return std::log(p < kProbFloor ? kProbFloor : p); }
}  // namespace loss_detail

// Soft Dice (smoothing 1e-5, mean over foreground classes, pooled over the
// batch) plus voxel-mean cross entropy, both on probabilities. labels holds
// integer class values; an optional 0/1 voxel mask restricts the loss (used
// for the body-part head, which has no background channel: pass fg_start=0).
template <typename S>
LossValueT<S> dice_ce_loss(const TensorT<S>& probs, const TensorT<S>& labels, const TensorT<S>* voxel_mask = nullptr,
                           int fg_start = 1, const std::vector<std::uint8_t>* channel_mask = nullptr) {
  const auto& s = probs.shape();
  if (probs.rank() != 5 || labels.rank() != 5) throw ShapeError("dice_ce_loss expects rank-5 tensors");
  const int B = s[0], K = s[1];
  const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
  if (labels.extent(0) != B || labels.extent(1) != 1 || labels.numel() != B * spatial)
    throw ShapeError("dice_ce_loss label shape mismatch");
  constexpr double eps = 1e-5;

  LossValueT<S> out;
  out.grad = TensorT<S>(s);

  // cross entropy
  double ce = 0.0;
  std::int64_t n_vox = 0;
  for (int n = 0; n < B; ++n) {
    const S* pp = probs.data() + static_cast<std::int64_t>(n) * K * spatial;
    const S* lp = labels.data() + static_cast<std::int64_t>(n) * spatial;
    const S* mp = voxel_mask ? voxel_mask->data() + static_cast<std::int64_t>(n) * spatial : nullptr;
    for (std::int64_t j = 0; j < spatial; ++j) {
      if (mp && mp[j] == S(0)) continue;
      const int y = static_cast<int>(lp[j]);
      if (y < 0 || y >= K) throw Error("dice_ce_loss label out of range");
      ce -= loss_detail::clamped_log(static_cast<double>(pp[y * spatial + j]));
      ++n_vox;
    }
  }
  if (n_vox == 0) return out;
  ce /= static_cast<double>(n_vox);
  // CE gradient
  for (int n = 0; n < B; ++n) {
    const S* pp = probs.data() + static_cast<std::int64_t>(n) * K * spatial;
    const S* lp = labels.data() + static_cast<std::int64_t>(n) * spatial;
    const S* mp = voxel_mask ? voxel_mask->data() + static_cast<std::int64_t>(n) * spatial : nullptr;
    S* gp = out.grad.data() + static_cast<std::int64_t>(n) * K * spatial;
    for (std::int64_t j = 0; j < spatial; ++j) {
      if (mp && mp[j] == S(0)) continue;
      const int y = static_cast<int>(lp[j]);
      const double p = std::max(static_cast<double>(pp[y * spatial + j]), loss_detail::kProbFloor);
      gp[y * spatial + j] -= static_cast<S>(1.0 / (p * static_cast<double>(n_vox)));
    }
  }

  // soft dice over classes fg_start..K-1, pooled over batch; an optional
  // channel mask restricts the dice classes (inactive channels contribute
  // nothing, used with masked softmax heads)
  int n_cls = 0;
  auto channel_active = [&](int c) {
    return !channel_mask || (*channel_mask)[static_cast<std::size_t>(c)] != 0;
  };
  for (int c = fg_start; c < K; ++c)
    if (channel_active(c)) ++n_cls;
  if (n_cls == 0) {
    out.value = ce;
    return out;
  }
  double dice_loss = 0.0;
  for (int c = fg_start; c < K; ++c) {
    if (!channel_active(c)) continue;
    double s_pg = 0.0, s_p = 0.0, s_g = 0.0;
    for (int n = 0; n < B; ++n) {
      const S* pp = probs.data() + (static_cast<std::int64_t>(n) * K + c) * spatial;
      const S* lp = labels.data() + static_cast<std::int64_t>(n) * spatial;
      const S* mp = voxel_mask ? voxel_mask->data() + static_cast<std::int64_t>(n) * spatial : nullptr;
      for (std::int64_t j = 0; j < spatial; ++j) {
        if (mp && mp[j] == S(0)) continue;
        const double p = pp[j];
        const double g = (static_cast<int>(lp[j]) == c) ? 1.0 : 0.0;
        s_pg += p * g;
        s_p += p;
        s_g += g;
      }
    }
    const double denom = s_p + s_g + eps;
    const double dice = (2.0 * s_pg + eps) / denom;
    dice_loss += 1.0 - dice;
    // d(1-dice)/dp = -(2g*denom - (2*s_pg+eps)) / denom^2
    const double inv_d2 = 1.0 / (denom * denom);
    const double num = 2.0 * s_pg + eps;
    for (int n = 0; n < B; ++n) {
      S* gp = out.grad.data() + (static_cast<std::int64_t>(n) * K + c) * spatial;
      const S* lp = labels.data() + static_cast<std::int64_t>(n) * spatial;
      const S* mp = voxel_mask ? voxel_mask->data() + static_cast<std::int64_t>(n) * spatial : nullptr;
      for (std::int64_t j = 0; j < spatial; ++j) {
        if (mp && mp[j] == S(0)) continue;
        const double g = (static_cast<int>(lp[j]) == c) ? 1.0 : 0.0;
        gp[j] -= static_cast<S>((2.0 * g * denom - num) * inv_d2 / n_cls);
      }
    }
  }
  dice_loss /= n_cls;

  out.value = ce + dice_loss;
  return out;
}

// Unbiased cross entropy: at background-labeled voxels the background
// probability is merged with the old classes (minus the ones overlapping the
// current label set) before the log-likelihood. With no old classes this is
// exactly standard CE.
template <typename S>
LossValueT<S> unce_loss(const TensorT<S>& probs, const TensorT<S>& labels, const std::set<int>& old_classes,
                        const std::set<int>& new_classes, const std::set<int>& overlap_classes) {
  for (int c : overlap_classes)
    if (!old_classes.count(c) || !new_classes.count(c))
      throw Error("unce_loss: overlap set must be a subset of old and new class sets");
  const auto& s = probs.shape();
  const int B = s[0], K = s[1];
  const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
  std::vector<int> merged_bg = {0};
  for (int c : old_classes)
    if (!overlap_classes.count(c)) merged_bg.push_back(c);

  LossValueT<S> out;
  out.grad = TensorT<S>(s);
  double ce = 0.0;
  const std::int64_t n_vox = static_cast<std::int64_t>(B) * spatial;
  for (int n = 0; n < B; ++n) {
    const S* pp = probs.data() + static_cast<std::int64_t>(n) * K * spatial;
    const S* lp = labels.data() + static_cast<std::int64_t>(n) * spatial;
    S* gp = out.grad.data() + static_cast<std::int64_t>(n) * K * spatial;
    for (std::int64_t j = 0; j < spatial; ++j) {
      const int y = static_cast<int>(lp[j]);
      if (y < 0 || y >= K) throw Error("unce_loss label out of range");
      if (y != 0) {
        const double p = std::max(static_cast<double>(pp[y * spatial + j]), loss_detail::kProbFloor);
        ce -= std::log(p);
        gp[y * spatial + j] -= static_cast<S>(1.0 / (p * static_cast<double>(n_vox)));
      } else {
        double merged = 0.0;
        for (int k : merged_bg) merged += pp[k * spatial + j];
        merged = std::max(merged, loss_detail::kProbFloor);
        ce -= std::log(merged);
        for (int k : merged_bg) gp[k * spatial + j] -= static_cast<S>(1.0 / (merged * static_cast<double>(n_vox)));
      }
    }
  }
  out.value = ce / static_cast<double>(n_vox);
  return out;
}

// Unbiased knowledge distillation: the new model's probabilities of every
// current-dataset class are merged into background, then a cross-model cross
// entropy is taken against the old model over old-minus-overlap classes and
// background.
template <typename S>
LossValueT<S> unkd_loss(const TensorT<S>& probs_new, const TensorT<S>& probs_old, const std::set<int>& old_classes,
                        const std::set<int>& new_classes, const std::set<int>& overlap_classes,
                        double weight = 10.0) {
  if (!probs_new.same_shape(probs_old)) throw ShapeError("unkd_loss: mismatched class sets");
  for (int c : overlap_classes)
    if (!old_classes.count(c) || !new_classes.count(c))
      throw Error("unkd_loss: overlap set must be a subset of old and new class sets");
  const auto& s = probs_new.shape();
  const int B = s[0], K = s[1];
  const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
  std::vector<int> merged_bg = {0};
  for (int c : new_classes) merged_bg.push_back(c);
  std::vector<int> targets;
  for (int c : old_classes)
    if (!overlap_classes.count(c)) targets.push_back(c);

  LossValueT<S> out;
  out.grad = TensorT<S>(s);
  double kd = 0.0;
  const std::int64_t n_vox = static_cast<std::int64_t>(B) * spatial;
  const double scale = weight / static_cast<double>(n_vox);
  for (int n = 0; n < B; ++n) {
    const S* pn = probs_new.data() + static_cast<std::int64_t>(n) * K * spatial;
    const S* po = probs_old.data() + static_cast<std::int64_t>(n) * K * spatial;
    S* gp = out.grad.data() + static_cast<std::int64_t>(n) * K * spatial;
    for (std::int64_t j = 0; j < spatial; ++j) {
      double merged = 0.0;
      for (int k : merged_bg) merged += pn[k * spatial + j];
      merged = std::max(merged, loss_detail::kProbFloor);
      const double tb = po[0 * spatial + j];
      kd -= tb * std::log(merged);
      for (int k : merged_bg) gp[k * spatial + j] -= static_cast<S>(tb / merged * scale);
      for (int c : targets) {
        const double t = po[c * spatial + j];
        const double q = std::max(static_cast<double>(pn[c * spatial + j]), loss_detail::kProbFloor);
        kd -= t * std::log(q);
        gp[c * spatial + j] -= static_cast<S>(t / q * scale);
      }
    }
  }
  out.value = kd * weight / static_cast<double>(n_vox);
  return out;
}

// ---------------------------------------------------------------------------
// 3D local POD pooling. Strategy 1 (the default) keeps three 2D mean
// projections per region, one along each axis; strategy 2 keeps only the 1D
// projections and is retained for comparison.

enum class PodStrategy { Projections2D, Projections1D };

template <typename S>
std::vector<S> local_pod_3d(const TensorT<S>& features, const std::vector<int>& scales,
                            PodStrategy strategy = PodStrategy::Projections2D) {
  if (features.rank() != 5) throw ShapeError("local_pod_3d expects a rank-5 feature tensor");
  const auto& s = features.shape();
  const int B = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
  std::vector<S> desc;
  for (int n = 0; n < B; ++n)
    for (int scale : scales)
      for (int rd = 0; rd < scale; ++rd)
        for (int rh = 0; rh < scale; ++rh)
          for (int rw = 0; rw < scale; ++rw) {
            const int d0 = rd * D / scale, d1 = (rd + 1) * D / scale;
            const int h0 = rh * H / scale, h1 = (rh + 1) * H / scale;
            const int w0 = rw * W / scale, w1 = (rw + 1) * W / scale;
            const int RD = d1 - d0, RH = h1 - h0, RW = w1 - w0;
            for (int c = 0; c < C; ++c) {
              const S* fp = features.data() + (static_cast<std::int64_t>(n) * C + c) * D * H * W;
              auto at = [&](int d, int h, int w) {
                return fp[(static_cast<std::int64_t>(d) * H + h) * W + w];
              };
              if (strategy == PodStrategy::Projections2D) {
                for (int h = h0; h < h1; ++h)
                  for (int w = w0; w < w1; ++w) {
                    double m = 0.0;
                    for (int d = d0; d < d1; ++d) m += at(d, h, w);
                    desc.push_back(static_cast<S>(m / RD));
                  }
                for (int d = d0; d < d1; ++d)
                  for (int w = w0; w < w1; ++w) {
                    double m = 0.0;
                    for (int h = h0; h < h1; ++h) m += at(d, h, w);
                    desc.push_back(static_cast<S>(m / RH));
                  }
                for (int d = d0; d < d1; ++d)
                  for (int h = h0; h < h1; ++h) {
                    double m = 0.0;
                    for (int w = w0; w < w1; ++w) m += at(d, h, w);
                    desc.push_back(static_cast<S>(m / RW));
                  }
              } else {
                for (int d = d0; d < d1; ++d) {
                  double m = 0.0;
                  for (int h = h0; h < h1; ++h)
                    for (int w = w0; w < w1; ++w) m += at(d, h, w);
                  desc.push_back(static_cast<S>(m / (RH * RW)));
                }
                for (int h = h0; h < h1; ++h) {
                  double m = 0.0;
                  for (int d = d0; d < d1; ++d)
                    for (int w = w0; w < w1; ++w) m += at(d, h, w);
                  desc.push_back(static_cast<S>(m / (RD * RW)));
                }
                for (int w = w0; w < w1; ++w) {
                  double m = 0.0;
                  for (int d = d0; d < d1; ++d)
                    for (int h = h0; h < h1; ++h) m += at(d, h, w);
                  desc.push_back(static_cast<S>(m / (RD * RH)));
                }
              }
            }
          }
  return desc;
}

// Mean-squared POD matching loss against a stored descriptor, with the
// gradient w.r.t. the feature tensor (the pooling is linear).
template <typename S>
struct PodLoss {
  double value = 0.0;
  TensorT<S> grad_features;
};

template <typename S>
PodLoss<S> pod_mse_loss(const TensorT<S>& features, const std::vector<S>& target_desc,
                        const std::vector<int>& scales, double factor,
                        PodStrategy strategy = PodStrategy::Projections2D) {
  std::vector<S> desc = local_pod_3d(features, scales, strategy);
  if (desc.size() != target_desc.size()) throw ShapeError("pod_mse_loss descriptor length mismatch");
  PodLoss<S> out;
  out.grad_features = TensorT<S>(features.shape());
  const auto& s = features.shape();
  const int B = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
  const double n_desc = static_cast<double>(desc.size());
  double loss = 0.0;
  std::size_t idx = 0;
  for (int n = 0; n < B; ++n)
    for (int scale : scales)
      for (int rd = 0; rd < scale; ++rd)
        for (int rh = 0; rh < scale; ++rh)
          for (int rw = 0; rw < scale; ++rw) {
            const int d0 = rd * D / scale, d1 = (rd + 1) * D / scale;
            const int h0 = rh * H / scale, h1 = (rh + 1) * H / scale;
            const int w0 = rw * W / scale, w1 = (rw + 1) * W / scale;
            const int RD = d1 - d0, RH = h1 - h0, RW = w1 - w0;
            for (int c = 0; c < C; ++c) {
              S* gp = out.grad_features.data() + (static_cast<std::int64_t>(n) * C + c) * D * H * W;
              auto gat = [&](int d, int h, int w) -> S& {
                return gp[(static_cast<std::int64_t>(d) * H + h) * W + w];
              };
              auto consume = [&](int len_axis, auto&& scatter) {
                const double diff = static_cast<double>(desc[idx]) - static_cast<double>(target_desc[idx]);
                loss += diff * diff;
                const S g = static_cast<S>(2.0 * diff * factor / (n_desc * len_axis));
                scatter(g);
                ++idx;
              };
              if (strategy == PodStrategy::Projections2D) {
                for (int h = h0; h < h1; ++h)
                  for (int w = w0; w < w1; ++w)
                    consume(RD, [&](S g) {
                      for (int d = d0; d < d1; ++d) gat(d, h, w) += g;
                    });
                for (int d = d0; d < d1; ++d)
                  for (int w = w0; w < w1; ++w)
                    consume(RH, [&](S g) {
                      for (int h = h0; h < h1; ++h) gat(d, h, w) += g;
                    });
                for (int d = d0; d < d1; ++d)
                  for (int h = h0; h < h1; ++h)
                    consume(RW, [&](S g) {
                      for (int w = w0; w < w1; ++w) gat(d, h, w) += g;
                    });
              } else {
                for (int d = d0; d < d1; ++d)
                  consume(RH * RW, [&](S g) {
                    for (int h = h0; h < h1; ++h)
                      for (int w = w0; w < w1; ++w) gat(d, h, w) += g;
                  });
                for (int h = h0; h < h1; ++h)
                  consume(RD * RW, [&](S g) {
                    for (int d = d0; d < d1; ++d)
                      for (int w = w0; w < w1; ++w) gat(d, h, w) += g;
                  });
                for (int w = w0; w < w1; ++w)
                  consume(RD * RH, [&](S g) {
                    for (int d = d0; d < d1; ++d)
                      for (int h = h0; h < h1; ++h) gat(d, h, w) += g;
                  });
              }
            }
          }
  out.value = loss / n_desc * factor;
  return out;
}

constexpr double kDefaultPodFactor = 0.001;
constexpr double kDefaultUnkdWeight = 10.0;

}  // namespace cseg

#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

enum class Mode { Train, Eval };

enum class KernelKind { Projection, Conv2D, PseudoP3D, Conv3D };

inline const char* kernel_kind_name(KernelKind k) {
  switch (k) {
    case KernelKind::Projection: return "projection";
    case KernelKind::Conv2D: return "conv2d";
    case KernelKind::PseudoP3D: return "p3d";
    case KernelKind::Conv3D: return "conv3d";
  }
  return "?";
}

inline KernelKind kernel_kind_from_name(const std::string& s) {
  if (s == "projection") return KernelKind::Projection;
  if (s == "conv2d") return KernelKind::Conv2D;
  if (s == "p3d") return KernelKind::PseudoP3D;
  if (s == "conv3d") return KernelKind::Conv3D;
  throw ConfigError("unknown kernel kind: " + s);
}

constexpr std::array<KernelKind, 4> kAllKernelKinds = {KernelKind::Projection, KernelKind::Conv2D,
                                                       KernelKind::PseudoP3D, KernelKind::Conv3D};

struct KernelSpec {
  KernelKind kind = KernelKind::Conv3D;
  int in_channels = 0;
  int out_channels = 0;
};

// Weight-only parameter count (bias excluded). The PseudoP3D intermediate
// channel count equals out_channels, so the P3D/Conv3D ratio is exactly 4/9
// for square channel counts.
inline std::int64_t kernel_param_count(const KernelSpec& spec) {
  const std::int64_t ci = spec.in_channels, co = spec.out_channels;
  switch (spec.kind) {
    case KernelKind::Projection: return ci * co;
    case KernelKind::Conv2D: return ci * co * 9;
    case KernelKind::PseudoP3D: return ci * co * 9 + co * co * 3;
    case KernelKind::Conv3D: return ci * co * 27;
  }
  return 0;
}

// Trainable value plus its gradient and momentum buffers. Frozen stores
// reject gradient writes and optimizer updates.
template <typename S>
struct Param {
  TensorT<S> value;
  TensorT<S> grad;
  TensorT<S> momentum;
  bool frozen = false;

  void init_buffers() {
    grad = TensorT<S>(value.shape());
    momentum = TensorT<S>(value.shape());
  }
  void zero_grad() { grad.zero(); }
  void add_grad(const TensorT<S>& g) {
    if (frozen) throw FrozenError("gradient write to frozen parameter store");
    grad.array() += g.array();
  }
};

// One (Nesterov) momentum SGD update. Polynomial LR decay is applied by the
// caller per epoch via poly_lr.
template <typename S>
void sgd_step(Param<S>& p, S lr, S momentum, bool nesterov) {
  if (lr <= S(0)) throw ConfigError("sgd_step requires lr > 0");
  if (momentum < S(0) || momentum >= S(1)) throw ConfigError("sgd_step momentum must be in [0,1)");
  if (p.frozen) throw FrozenError("sgd_step on frozen parameter store");
  auto v = p.momentum.array();
  auto g = p.grad.array();
  v = momentum * v + g;
  if (nesterov)
    p.value.array() -= lr * (g + momentum * v);
  else
    p.value.array() -= lr * v;
}

inline double poly_lr(double lr0, int epoch, int total_epochs, double power = 0.9) {
  double frac = 1.0 - static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return lr0 * std::pow(frac, power);
}

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<MatRM<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const MatRM<S>>;

// im2col for a single item: input (C, D, H, W) -> columns (C*kd*kh*kw, D*H*W),
// "same" zero padding, stride 1.
template <typename S>
void im2col(const S* in, int C, int D, int H, int W, int kd, int kh, int kw, S* cols) {
  const int pd = (kd - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  const std::int64_t spatial = static_cast<std::int64_t>(D) * H * W;
  std::int64_t row = 0;
  for (int c = 0; c < C; ++c) {
    const S* chan = in + static_cast<std::int64_t>(c) * spatial;
    for (int od = 0; od < kd; ++od) {
      const int dz = od - pd;
      for (int oh = 0; oh < kh; ++oh) {
        const int dy = oh - ph;
        for (int ow = 0; ow < kw; ++ow, ++row) {
          const int dx = ow - pw;
          S* dst = cols + row * spatial;
          for (int d = 0; d < D; ++d) {
            const int sd = d + dz;
            if (sd < 0 || sd >= D) {
              std::fill_n(dst + static_cast<std::int64_t>(d) * H * W, H * W, S(0));
              continue;
            }
            for (int h = 0; h < H; ++h) {
              const int sh = h + dy;
              S* drow = dst + (static_cast<std::int64_t>(d) * H + h) * W;
              if (sh < 0 || sh >= H) {
                std::fill_n(drow, W, S(0));
                continue;
              }
              const S* srow = chan + (static_cast<std::int64_t>(sd) * H + sh) * W;
              if (dx >= 0) {
                const int n = W - dx;
                std::copy_n(srow + dx, n, drow);
                std::fill_n(drow + n, dx, S(0));
              } else {
                std::fill_n(drow, -dx, S(0));
                std::copy_n(srow, W + dx, drow - dx);
              }
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into (C, D, H, W).
template <typename S>
void col2im_add(const S* cols, int C, int D, int H, int W, int kd, int kh, int kw, S* out) {
  const int pd = (kd - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  const std::int64_t spatial = static_cast<std::int64_t>(D) * H * W;
  std::int64_t row = 0;
  for (int c = 0; c < C; ++c) {
    S* chan = out + static_cast<std::int64_t>(c) * spatial;
    for (int od = 0; od < kd; ++od) {
      const int dz = od - pd;
      for (int oh = 0; oh < kh; ++oh) {
        const int dy = oh - ph;
        for (int ow = 0; ow < kw; ++ow, ++row) {
          const int dx = ow - pw;
          const S* src = cols + row * spatial;
          for (int d = 0; d < D; ++d) {
            const int sd = d + dz;
            if (sd < 0 || sd >= D) continue;
            for (int h = 0; h < H; ++h) {
              const int sh = h + dy;
              if (sh < 0 || sh >= H) continue;
              S* drow = chan + (static_cast<std::int64_t>(sd) * H + sh) * W;
              const S* srow = src + (static_cast<std::int64_t>(d) * H + h) * W;
              const int lo = std::max(0, -dx);
              const int hi = std::min(W, W - dx);
              for (int w = lo; w < hi; ++w) drow[w + dx] += srow[w];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Layers. Each caches what backward needs when run in Train mode; backward
// without a cached forward is an error.

template <typename S>
class Conv {
 public:
  Conv() = default;
  Conv(KernelSpec spec, Rng rng) : spec_(spec) {
    auto kdims = [](KernelKind k) -> std::array<int, 3> {
      switch (k) {
        case KernelKind::Projection: return {1, 1, 1};
        case KernelKind::Conv2D: return {1, 3, 3};
        case KernelKind::PseudoP3D: return {1, 3, 3};  // first stage; second is (3,1,1)
        case KernelKind::Conv3D: return {3, 3, 3};
      }
      return {1, 1, 1};
    };
    auto k1 = kdims(spec.kind);
    init_weight(w1_, spec.in_channels, spec.out_channels, k1, rng.fork(1));
    b1_.value = TensorT<S>({spec.out_channels});
    b1_.init_buffers();
    if (spec.kind == KernelKind::PseudoP3D) {
      init_weight(w2_, spec.out_channels, spec.out_channels, {3, 1, 1}, rng.fork(2));
      b2_.value = TensorT<S>({spec.out_channels});
      b2_.init_buffers();
    }
  }

  const KernelSpec& spec() const { return spec_; }

  TensorT<S> forward(const TensorT<S>& x, Mode mode) {
    if (x.rank() != 5) throw ShapeError("conv expects rank-5 input");
    if (x.extent(1) != spec_.in_channels)
      throw ShapeError("conv channel mismatch: got " + x.shape_str());
    TensorT<S> y = apply(w1_.value, b1_.value, x);
    if (spec_.kind == KernelKind::PseudoP3D) {
      if (mode == Mode::Train) mid_ = y;
      y = apply(w2_.value, b2_.value, y);
    }
    if (mode == Mode::Train)
      in_ = x;
    else
      in_ = std::nullopt;
    return y;
  }

  TensorT<S> backward(const TensorT<S>& grad_out) {
    if (!in_) throw Error("conv backward without cached forward");
    TensorT<S> g = grad_out;
    if (spec_.kind == KernelKind::PseudoP3D) {
      g = apply_backward(w2_, b2_, *mid_, g);
      mid_.reset();
    }
    TensorT<S> gin = apply_backward(w1_, b1_, *in_, g);
    in_.reset();
    return gin;
  }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> p = {&w1_, &b1_};
    if (spec_.kind == KernelKind::PseudoP3D) {
      p.push_back(&w2_);
      p.push_back(&b2_);
    }
    return p;
  }

  std::vector<TensorT<S>*> state_tensors() {
    std::vector<TensorT<S>*> t = {&w1_.value, &b1_.value};
    if (spec_.kind == KernelKind::PseudoP3D) {
      t.push_back(&w2_.value);
      t.push_back(&b2_.value);
    }
    return t;
  }

  std::int64_t weight_count() const { return kernel_param_count(spec_); }

 private:
  static void init_weight(Param<S>& p, int cin, int cout, std::array<int, 3> k, Rng rng) {
    p.value = TensorT<S>({cout, cin, k[0], k[1], k[2]});
    const double fan_in = static_cast<double>(cin) * k[0] * k[1] * k[2];
    const double sd = std::sqrt(2.0 / fan_in);
    for (std::int64_t i = 0; i < p.value.numel(); ++i) p.value[i] = static_cast<S>(rng.normal(0.0, sd));
    p.init_buffers();
  }

  TensorT<S> apply(const TensorT<S>& w, const TensorT<S>& b, const TensorT<S>& x) const {
    const auto& xs = x.shape();
    const int B = xs[0], C = xs[1], D = xs[2], H = xs[3], W = xs[4];
    const auto& ws = w.shape();
    const int cout = ws[0], kd = ws[2], kh = ws[3], kw = ws[4];
    const std::int64_t krows = static_cast<std::int64_t>(C) * kd * kh * kw;
    const std::int64_t spatial = static_cast<std::int64_t>(D) * H * W;
    TensorT<S> y({B, cout, D, H, W});
    std::vector<S> cols(static_cast<std::size_t>(krows * spatial));
    detail::ConstMatMap<S> wm(w.data(), cout, krows);
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bias(b.data(), cout);
    for (int n = 0; n < B; ++n) {
      detail::im2col(x.data() + static_cast<std::int64_t>(n) * C * spatial, C, D, H, W, kd, kh, kw, cols.data());
      detail::ConstMatMap<S> cm(cols.data(), krows, spatial);
      detail::MatMap<S> ym(y.data() + static_cast<std::int64_t>(n) * cout * spatial, cout, spatial);
      ym.noalias() = wm * cm;
      ym.colwise() += bias;
    }
    return y;
  }

  TensorT<S> apply_backward(Param<S>& w, Param<S>& b, const TensorT<S>& x, const TensorT<S>& grad_out) {
    const auto& xs = x.shape();
    const int B = xs[0], C = xs[1], D = xs[2], H = xs[3], W = xs[4];
    const auto& ws = w.value.shape();
    const int cout = ws[0], kd = ws[2], kh = ws[3], kw = ws[4];
    const std::int64_t krows = static_cast<std::int64_t>(C) * kd * kh * kw;
    const std::int64_t spatial = static_cast<std::int64_t>(D) * H * W;
    if (w.frozen || b.frozen) throw FrozenError("gradient write to frozen parameter store");

    TensorT<S> gin({B, C, D, H, W});
    std::vector<S> cols(static_cast<std::size_t>(krows * spatial));
    detail::ConstMatMap<S> wm(w.value.data(), cout, krows);
    detail::MatMap<S> gw(w.grad.data(), cout, krows);
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gb(b.grad.data(), cout);
    detail::MatRM<S> gcols(krows, spatial);
    for (int n = 0; n < B; ++n) {
      detail::ConstMatMap<S> gom(grad_out.data() + static_cast<std::int64_t>(n) * cout * spatial, cout, spatial);
      // grad wrt weights: rebuild columns instead of caching them
      detail::im2col(x.data() + static_cast<std::int64_t>(n) * C * spatial, C, D, H, W, kd, kh, kw, cols.data());
      detail::ConstMatMap<S> cm(cols.data(), krows, spatial);
      gw.noalias() += gom * cm.transpose();
      gb.noalias() += gom.rowwise().sum();
      // grad wrt input
      gcols.noalias() = wm.transpose() * gom;
      detail::col2im_add(gcols.data(), C, D, H, W, kd, kh, kw,
                         gin.data() + static_cast<std::int64_t>(n) * C * spatial);
    }
    return gin;
  }

  KernelSpec spec_;
  Param<S> w1_, b1_, w2_, b2_;
  std::optional<TensorT<S>> in_;
  std::optional<TensorT<S>> mid_;
};

// Normalizes over the spatial extent of each (batch, channel) slice;
// per-instance statistics are used in both train and eval mode.
template <typename S>
class InstanceNorm {
 public:
  InstanceNorm() = default;
  explicit InstanceNorm(int channels) {
    gamma_.value = TensorT<S>::full({channels}, S(1));
    beta_.value = TensorT<S>({channels});
    gamma_.init_buffers();
    beta_.init_buffers();
  }

  TensorT<S> forward(const TensorT<S>& x, Mode mode) {
    const auto& s = x.shape();
    const int B = s[0], C = s[1];
    const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
    TensorT<S> y(s);
    if (mode == Mode::Train) {
      xhat_ = TensorT<S>(s);
      invstd_.assign(static_cast<std::size_t>(B) * C, S(0));
    }
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        const S* xp = x.data() + (static_cast<std::int64_t>(n) * C + c) * spatial;
        S* yp = y.data() + (static_cast<std::int64_t>(n) * C + c) * spatial;
        Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xa(xp, spatial);
        double mean = xa.template cast<double>().mean();
        double var = (xa.template cast<double>() - mean).square().mean();
        S inv = static_cast<S>(1.0 / std::sqrt(var + kEps));
        Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> ya(yp, spatial);
        ya = (xa - static_cast<S>(mean)) * inv;
        if (mode == Mode::Train) {
          S* hp = xhat_->data() + (static_cast<std::int64_t>(n) * C + c) * spatial;
          std::copy_n(yp, spatial, hp);
          invstd_[static_cast<std::size_t>(n) * C + c] = inv;
        }
        ya = ya * gamma_.value[c] + beta_.value[c];
      }
    return y;
  }

  TensorT<S> backward(const TensorT<S>& grad_out) {
    if (!xhat_) throw Error("instance norm backward without cached forward");
    if (gamma_.frozen || beta_.frozen) throw FrozenError("gradient write to frozen parameter store");
    const auto& s = grad_out.shape();
    const int B = s[0], C = s[1];
    const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
    TensorT<S> gin(s);
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * spatial;
        Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> go(grad_out.data() + off, spatial);
        Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xh(xhat_->data() + off, spatial);
        Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> gi(gin.data() + off, spatial);
        const double gsum = go.template cast<double>().sum();
        const double gxsum = (go * xh).template cast<double>().sum();
        gamma_.grad[c] += static_cast<S>(gxsum);
        beta_.grad[c] += static_cast<S>(gsum);
        const S m = static_cast<S>(1.0 / static_cast<double>(spatial));
        const S a = gamma_.value[c] * invstd_[static_cast<std::size_t>(n) * C + c];
        gi = a * (go - static_cast<S>(gsum) * m - xh * (static_cast<S>(gxsum) * m));
      }
    xhat_.reset();
    return gin;
  }

  std::vector<Param<S>*> params() { return {&gamma_, &beta_}; }
  std::vector<TensorT<S>*> state_tensors() { return {&gamma_.value, &beta_.value}; }

 private:
  static constexpr double kEps = 1e-5;
  Param<S> gamma_, beta_;
  std::optional<TensorT<S>> xhat_;
  std::vector<S> invstd_;
};

// Normalizes per channel over (batch, spatial); keeps running statistics for
// eval mode. With frozen stats the running statistics become constants in
// train mode too (used by distillation, where the student must realize one
// fixed function).
template <typename S>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(int channels) {
    gamma_.value = TensorT<S>::full({channels}, S(1));
    beta_.value = TensorT<S>({channels});
    gamma_.init_buffers();
    beta_.init_buffers();
    running_mean_ = TensorT<S>({channels});
    running_var_ = TensorT<S>::full({channels}, S(1));
  }

  TensorT<S> forward(const TensorT<S>& x, Mode mode) {
    const auto& s = x.shape();
    const int B = s[0], C = s[1];
    const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
    const std::int64_t n_per_c = static_cast<std::int64_t>(B) * spatial;
    TensorT<S> y(s);
    if (mode == Mode::Train) {
      xhat_ = TensorT<S>(s);
      invstd_.assign(static_cast<std::size_t>(C), S(0));
    }
    for (int c = 0; c < C; ++c) {
      double mean, var;
      if (mode == Mode::Train && !frozen_stats_) {
        double sum = 0.0, sq = 0.0;
        for (int n = 0; n < B; ++n) {
          const S* xp = x.data() + (static_cast<std::int64_t>(n) * C + c) * spatial;
          Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xa(xp, spatial);
          sum += xa.template cast<double>().sum();
          sq += xa.template cast<double>().square().sum();
        }
        mean = sum / static_cast<double>(n_per_c);
        var = sq / static_cast<double>(n_per_c) - mean * mean;
        if (var < 0.0) var = 0.0;
        running_mean_[c] = static_cast<S>(0.9 * running_mean_[c] + 0.1 * mean);
        running_var_[c] = static_cast<S>(0.9 * running_var_[c] + 0.1 * var);
      } else {
        mean = running_mean_[c];
        var = running_var_[c];
      }
      const S inv = static_cast<S>(1.0 / std::sqrt(var + kEps));
      if (mode == Mode::Train) invstd_[static_cast<std::size_t>(c)] = inv;
      for (int n = 0; n < B; ++n) {
        const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * spatial;
        Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xa(x.data() + off, spatial);
        Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> ya(y.data() + off, spatial);
        ya = (xa - static_cast<S>(mean)) * inv;
        if (mode == Mode::Train) {
          std::copy_n(y.data() + off, spatial, xhat_->data() + off);
        }
        ya = ya * gamma_.value[c] + beta_.value[c];
      }
    }
    return y;
  }

  TensorT<S> backward(const TensorT<S>& grad_out) {
    if (!xhat_) throw Error("batch norm backward without cached forward");
    if (gamma_.frozen || beta_.frozen) throw FrozenError("gradient write to frozen parameter store");
    const auto& s = grad_out.shape();
    const int B = s[0], C = s[1];
    const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
    const double n_per_c = static_cast<double>(B) * static_cast<double>(spatial);
    TensorT<S> gin(s);
    for (int c = 0; c < C; ++c) {
      double gsum = 0.0, gxsum = 0.0;
      for (int n = 0; n < B; ++n) {
        const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * spatial;
        Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> go(grad_out.data() + off, spatial);
        Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xh(xhat_->data() + off, spatial);
        gsum += go.template cast<double>().sum();
        gxsum += (go * xh).template cast<double>().sum();
      }
      gamma_.grad[c] += static_cast<S>(gxsum);
      beta_.grad[c] += static_cast<S>(gsum);
      const S a = gamma_.value[c] * invstd_[static_cast<std::size_t>(c)];
      const S mg = static_cast<S>(gsum / n_per_c);
      const S mgx = static_cast<S>(gxsum / n_per_c);
      for (int n = 0; n < B; ++n) {
        const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * spatial;
        Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> go(grad_out.data() + off, spatial);
        Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xh(xhat_->data() + off, spatial);
        Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> gi(gin.data() + off, spatial);
        if (frozen_stats_)
          gi = a * go;  // stats are constants, no batch jacobian terms
        else
          gi = a * (go - mg - xh * mgx);
      }
    }
    xhat_.reset();
    return gin;
  }

  void set_frozen_stats(bool f) { frozen_stats_ = f; }
  bool frozen_stats() const { return frozen_stats_; }

  std::vector<Param<S>*> params() { return {&gamma_, &beta_}; }
  std::vector<TensorT<S>*> state_tensors() {
    return {&gamma_.value, &beta_.value, &running_mean_, &running_var_};
  }
  TensorT<S>& running_mean() { return running_mean_; }
  TensorT<S>& running_var() { return running_var_; }

 private:
  static constexpr double kEps = 1e-5;
  Param<S> gamma_, beta_;
  TensorT<S> running_mean_, running_var_;
  bool frozen_stats_ = false;
  std::optional<TensorT<S>> xhat_;
  std::vector<S> invstd_;
};

template <typename S>
class LeakyReLU {
 public:
  LeakyReLU() = default;
  explicit LeakyReLU(double slope) : slope_(static_cast<S>(slope)) {}

  TensorT<S> forward(const TensorT<S>& x, Mode mode) {
    TensorT<S> y(x.shape());
    y.array() = (x.array() > S(0)).select(x.array(), x.array() * slope_);
    if (mode == Mode::Train)
      in_ = x;
    else
      in_.reset();
    return y;
  }

  TensorT<S> backward(const TensorT<S>& grad_out) {
    if (!in_) throw Error("leaky relu backward without cached forward");
    TensorT<S> gin(grad_out.shape());
    gin.array() = (in_->array() > S(0)).select(grad_out.array(), grad_out.array() * slope_);
    in_.reset();
    return gin;
  }

  std::vector<Param<S>*> params() { return {}; }
  std::vector<TensorT<S>*> state_tensors() { return {}; }
  S slope() const { return slope_; }

 private:
  S slope_ = S(0.01);
  std::optional<TensorT<S>> in_;
};

template <typename S>
class ReLU {
 public:
  TensorT<S> forward(const TensorT<S>& x, Mode mode) {
    TensorT<S> y(x.shape());
    y.array() = x.array().max(S(0));
    if (mode == Mode::Train)
      in_ = x;
    else
      in_.reset();
    return y;
  }
  TensorT<S> backward(const TensorT<S>& grad_out) {
    if (!in_) throw Error("relu backward without cached forward");
    TensorT<S> gin(grad_out.shape());
    gin.array() = (in_->array() > S(0)).select(grad_out.array(), S(0));
    in_.reset();
    return gin;
  }
  std::vector<Param<S>*> params() { return {}; }
  std::vector<TensorT<S>*> state_tensors() { return {}; }

 private:
  std::optional<TensorT<S>> in_;
};

template <typename S>
class MaxPool {
 public:
  MaxPool() = default;
  MaxPool(int window, int stride) : window_(window), stride_(stride) {}

  TensorT<S> forward(const TensorT<S>& x, Mode mode) {
    const auto& s = x.shape();
    const int B = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    if (D < window_ || H < window_ || W < window_) throw ShapeError("maxpool window larger than input");
    const int OD = (D - window_) / stride_ + 1;
    const int OH = (H - window_) / stride_ + 1;
    const int OW = (W - window_) / stride_ + 1;
    TensorT<S> y({B, C, OD, OH, OW});
    if (mode == Mode::Train) {
      argmax_.assign(static_cast<std::size_t>(y.numel()), 0);
      in_shape_ = s;
    }
    std::int64_t oi = 0;
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        const S* xp = x.data() + (static_cast<std::int64_t>(n) * C + c) * D * H * W;
        for (int od = 0; od < OD; ++od)
          for (int oh = 0; oh < OH; ++oh)
            for (int ow = 0; ow < OW; ++ow, ++oi) {
              S best = -std::numeric_limits<S>::infinity();
              std::int64_t best_idx = 0;
              for (int kd = 0; kd < window_; ++kd)
                for (int kh = 0; kh < window_; ++kh)
                  for (int kw = 0; kw < window_; ++kw) {
                    const std::int64_t idx =
                        (static_cast<std::int64_t>(od * stride_ + kd) * H + (oh * stride_ + kh)) * W +
                        (ow * stride_ + kw);
                    if (xp[idx] > best) {
                      best = xp[idx];
                      best_idx = idx;
                    }
                  }
              y[oi] = best;
              if (mode == Mode::Train)
                argmax_[static_cast<std::size_t>(oi)] = (static_cast<std::int64_t>(n) * C + c) * D * H * W + best_idx;
            }
      }
    return y;
  }

  TensorT<S> backward(const TensorT<S>& grad_out) {
    if (argmax_.empty()) throw Error("maxpool backward without cached forward");
    TensorT<S> gin(in_shape_);
    for (std::int64_t i = 0; i < grad_out.numel(); ++i) gin[argmax_[static_cast<std::size_t>(i)]] += grad_out[i];
    argmax_.clear();
    return gin;
  }

  std::vector<Param<S>*> params() { return {}; }
  std::vector<TensorT<S>*> state_tensors() { return {}; }
  int window() const { return window_; }
  int stride() const { return stride_; }

 private:
  int window_ = 2, stride_ = 2;
  std::vector<std::int64_t> argmax_;
  std::vector<int> in_shape_;
};

template <typename S>
class NearestUpsample {
 public:
  NearestUpsample() = default;
  explicit NearestUpsample(int factor) : factor_(factor) {}

  TensorT<S> forward(const TensorT<S>& x, Mode mode) {
    const auto& s = x.shape();
    const int B = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    TensorT<S> y({B, C, D * factor_, H * factor_, W * factor_});
    const int OH = H * factor_, OW = W * factor_;
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        const S* xp = x.data() + (static_cast<std::int64_t>(n) * C + c) * D * H * W;
        S* yp = y.data() + (static_cast<std::int64_t>(n) * C + c) * D * factor_ * OH * OW;
        for (int od = 0; od < D * factor_; ++od)
          for (int oh = 0; oh < OH; ++oh) {
            const S* srow = xp + (static_cast<std::int64_t>(od / factor_) * H + oh / factor_) * W;
            S* drow = yp + (static_cast<std::int64_t>(od) * OH + oh) * OW;
            for (int ow = 0; ow < OW; ++ow) drow[ow] = srow[ow / factor_];
          }
      }
    if (mode == Mode::Train) in_shape_ = s;
    return y;
  }

  TensorT<S> backward(const TensorT<S>& grad_out) {
    if (in_shape_.empty()) throw Error("upsample backward without cached forward");
    const int B = in_shape_[0], C = in_shape_[1], D = in_shape_[2], H = in_shape_[3], W = in_shape_[4];
    TensorT<S> gin(in_shape_);
    const int OH = H * factor_, OW = W * factor_;
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        S* gp = gin.data() + (static_cast<std::int64_t>(n) * C + c) * D * H * W;
        const S* op = grad_out.data() + (static_cast<std::int64_t>(n) * C + c) * D * factor_ * OH * OW;
        for (int od = 0; od < D * factor_; ++od)
          for (int oh = 0; oh < OH; ++oh) {
            const S* srow = op + (static_cast<std::int64_t>(od) * OH + oh) * OW;
            S* drow = gp + (static_cast<std::int64_t>(od / factor_) * H + oh / factor_) * W;
            for (int ow = 0; ow < OW; ++ow) drow[ow / factor_] += srow[ow];
          }
      }
    in_shape_.clear();
    return gin;
  }

  std::vector<Param<S>*> params() { return {}; }
  std::vector<TensorT<S>*> state_tensors() { return {}; }
  int factor() const { return factor_; }

 private:
  int factor_ = 2;
  std::vector<int> in_shape_;
};

// Per-voxel softmax over the channel axis. An optional active-channel mask
// restricts the distribution to a subset of channels (inactive channels get
// probability 0); used by the shared-model baselines whose label space grows
// step by step.
template <typename S>
class SoftmaxOverChannels {
 public:
  SoftmaxOverChannels() = default;

  void set_active(std::vector<std::uint8_t> active) { active_ = std::move(active); }
  const std::vector<std::uint8_t>& active() const { return active_; }

  TensorT<S> forward(const TensorT<S>& x, Mode mode) {
    const auto& s = x.shape();
    const int B = s[0], C = s[1];
    if (!active_.empty() && static_cast<int>(active_.size()) != C)
      throw ShapeError("softmax active mask length mismatch");
    const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
    TensorT<S> y(s);
    for (int n = 0; n < B; ++n) {
      const S* xp = x.data() + static_cast<std::int64_t>(n) * C * spatial;
      S* yp = y.data() + static_cast<std::int64_t>(n) * C * spatial;
      for (std::int64_t j = 0; j < spatial; ++j) {
        S mx = -std::numeric_limits<S>::infinity();
        for (int c = 0; c < C; ++c)
          if (is_active(c) && xp[c * spatial + j] > mx) mx = xp[c * spatial + j];
        S denom = S(0);
        for (int c = 0; c < C; ++c) {
          if (is_active(c)) {
            const S e = std::exp(xp[c * spatial + j] - mx);
            yp[c * spatial + j] = e;
            denom += e;
          } else {
            yp[c * spatial + j] = S(0);
          }
        }
        for (int c = 0; c < C; ++c) yp[c * spatial + j] /= denom;
      }
    }
    if (mode == Mode::Train)
      out_ = y;
    else
      out_.reset();
    return y;
  }

  TensorT<S> backward(const TensorT<S>& grad_out) {
    if (!out_) throw Error("softmax backward without cached forward");
    const auto& s = grad_out.shape();
    const int B = s[0], C = s[1];
    const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
    TensorT<S> gin(s);
    for (int n = 0; n < B; ++n) {
      const S* gp = grad_out.data() + static_cast<std::int64_t>(n) * C * spatial;
      const S* pp = out_->data() + static_cast<std::int64_t>(n) * C * spatial;
      S* ip = gin.data() + static_cast<std::int64_t>(n) * C * spatial;
      for (std::int64_t j = 0; j < spatial; ++j) {
        S dot = S(0);
        for (int c = 0; c < C; ++c) dot += gp[c * spatial + j] * pp[c * spatial + j];
        for (int c = 0; c < C; ++c) ip[c * spatial + j] = pp[c * spatial + j] * (gp[c * spatial + j] - dot);
      }
    }
    out_.reset();
    return gin;
  }

  std::vector<Param<S>*> params() { return {}; }
  std::vector<TensorT<S>*> state_tensors() { return {}; }

 private:
  bool is_active(int c) const { return active_.empty() || active_[static_cast<std::size_t>(c)] != 0; }
  std::vector<std::uint8_t> active_;
  std::optional<TensorT<S>> out_;
};

template <typename S>
using Layer = std::variant<Conv<S>, InstanceNorm<S>, BatchNorm<S>, LeakyReLU<S>, ReLU<S>, MaxPool<S>,
                           NearestUpsample<S>, SoftmaxOverChannels<S>>;

template <typename S>
TensorT<S> forward(Layer<S>& layer, const TensorT<S>& x, Mode mode) {
  return std::visit([&](auto& l) { return l.forward(x, mode); }, layer);
}

template <typename S>
TensorT<S> backward(Layer<S>& layer, const TensorT<S>& grad_out) {
  return std::visit([&](auto& l) { return l.backward(grad_out); }, layer);
}

template <typename S>
std::vector<Param<S>*> layer_params(Layer<S>& layer) {
  return std::visit([](auto& l) { return l.params(); }, layer);
}

template <typename S>
std::vector<TensorT<S>*> layer_state(Layer<S>& layer) {
  return std::visit([](auto& l) { return l.state_tensors(); }, layer);
}

}  // namespace cseg

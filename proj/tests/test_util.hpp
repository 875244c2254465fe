#pragma once

// Shared test utilities. The finite-difference machinery here is the
// independent gradient oracle: it only calls forward passes and never reuses
// the analytic backward path it checks.

#include <functional>
#include <vector>

#include "cseg/nn.hpp"
#include "cseg/segnet.hpp"

namespace cseg::testing {

inline TensorT<double> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorT<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_tensor_f(std::vector<int> shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Relative error with an absolute floor so dead-zero gradients compare
// sanely.
inline double rel_err(double a, double b) {
  const double scale = std::max({std::fabs(a), std::fabs(b), 0.1});
  return std::fabs(a - b) / scale;
}

// Central finite differences (h=1e-3) on a copyable state. `loss` must be a
// pure function of a state copy; `values` enumerates every perturbable tensor
// in a stable order and `grads` the matching analytic gradients.
template <typename State>
double max_grad_rel_err(const State& base, const std::function<double(State&)>& loss,
                        const std::function<std::vector<TensorT<double>*>(State&)>& values,
                        const std::vector<TensorT<double>>& analytic, double h = 1e-3) {
  double worst = 0.0;
  for (std::size_t ti = 0;; ++ti) {
    {
      State probe = base;
      if (ti >= values(probe).size()) break;
    }
    const std::int64_t n = analytic[ti].numel();
    for (std::int64_t i = 0; i < n; ++i) {
      State plus = base;
      (*values(plus)[ti])[i] += h;
      const double lp = loss(plus);
      State minus = base;
      (*values(minus)[ti])[i] -= h;
      const double lm = loss(minus);
      const double fd = (lp - lm) / (2.0 * h);
      worst = std::max(worst, rel_err(analytic[ti][i], fd));
    }
  }
  return worst;
}

// Gradient check for a single layer: loss = sum(w ⊙ forward(x)).
struct LayerState {
  Layer<double> layer;
  TensorT<double> input;
  TensorT<double> weights;
};

inline double check_layer_gradients(const Layer<double>& layer, const TensorT<double>& input, Rng& rng) {
  LayerState base{layer, input, TensorT<double>()};
  {
    LayerState probe = base;
    TensorT<double> y = forward(probe.layer, probe.input, Mode::Train);
    base.weights = random_tensor(y.shape(), rng, 0.5, 1.5);
  }
  auto loss = [](LayerState& s) {
    TensorT<double> y = forward(s.layer, s.input, Mode::Train);
    double acc = 0.0;
    for (std::int64_t i = 0; i < y.numel(); ++i) acc += y[i] * s.weights[i];
    return acc;
  };
  auto values = [](LayerState& s) {
    std::vector<TensorT<double>*> v;
    for (auto* p : layer_params(s.layer)) v.push_back(&p->value);
    v.push_back(&s.input);
    return v;
  };
  // analytic gradients
  std::vector<TensorT<double>> analytic;
  {
    LayerState s = base;
    forward(s.layer, s.input, Mode::Train);
    TensorT<double> gin = backward(s.layer, s.weights);
    for (auto* p : layer_params(s.layer)) analytic.push_back(p->grad);
    analytic.push_back(gin);
  }
  return max_grad_rel_err<LayerState>(base, loss, values, analytic);
}

}  // namespace cseg::testing

#include "cseg/training.hpp"

#include <algorithm>
#include <cmath>

namespace cseg {

std::vector<int> local_channel_map(const std::vector<int>& subset, int n_global) {
  std::vector<int> map(static_cast<std::size_t>(n_global) + 1, 0);
  for (std::size_t i = 0; i < subset.size(); ++i) {
    const int g = subset[i];
    if (g <= 0 || g > n_global) throw ConfigError("subset class id out of registry range");
    map[static_cast<std::size_t>(g)] = static_cast<int>(i) + 1;
  }
  return map;
}

Batch make_batch(const std::vector<const PhantomSample*>& samples, const std::vector<int>& local_of_global) {
  if (samples.empty()) throw Error("make_batch: empty sample list");
  const auto& s0 = samples[0]->image.shape();
  const int B = static_cast<int>(samples.size());
  Batch b;
  b.volumes = Tensor({B, 1, s0[0], s0[1], s0[2]});
  b.labels = Tensor({B, 1, s0[0], s0[1], s0[2]});
  const std::int64_t spatial = static_cast<std::int64_t>(s0[0]) * s0[1] * s0[2];
  for (int n = 0; n < B; ++n) {
    const PhantomSample& s = *samples[static_cast<std::size_t>(n)];
    std::copy_n(s.image.data(), spatial, b.volumes.data() + n * spatial);
    for (std::int64_t j = 0; j < spatial; ++j) {
      const int g = static_cast<int>(s.labels[j]);
      b.labels[n * spatial + j] = static_cast<float>(local_of_global[static_cast<std::size_t>(g)]);
    }
  }
  return b;
}

std::vector<double> train_decoder(Encoder& enc, Decoder& dec, const PhantomDataset& ds,
                                  const std::vector<int>& indices, int epochs, const OptimOptions& opt, Rng rng) {
  const auto local = local_channel_map(ds.spec.labeled_subset,
                                       ds.spec.world.registry.num_foreground());
  std::vector<double> epoch_losses;
  for (int e = 0; e < epochs; ++e) {
    const double lr = poly_lr(opt.lr0, e, epochs, opt.poly_power);
    std::vector<int> order = indices;
    rng.fork(1000 + static_cast<std::uint64_t>(e)).shuffle(order);
    double loss_sum = 0.0;
    int n_batches = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(opt.batch)) {
      std::vector<PhantomSample> staged;
      std::vector<const PhantomSample*> ptrs;
      for (std::size_t k = pos; k < std::min(order.size(), pos + static_cast<std::size_t>(opt.batch)); ++k) {
        const PhantomSample& s = ds.samples[static_cast<std::size_t>(order[k])];
        if (opt.augment) {
          Rng aug = rng.fork(mix_seed(static_cast<std::uint64_t>(e), 7700 + static_cast<std::uint64_t>(order[k])));
          AugmentParams p = sample_augment_params(aug);
          staged.push_back(augment_with(s, p, aug.fork(1)));
        } else {
          staged.push_back(s);
        }
      }
      for (const auto& s : staged) ptrs.push_back(&s);
      Batch batch = make_batch(ptrs, local);
      auto feats = enc.forward(batch.volumes, Mode::Eval);
      Tensor probs = dec.forward(feats, Mode::Train);
      ensure_finite(probs, "decoder forward");
      auto loss = dice_ce_loss(probs, batch.labels);
      if (!std::isfinite(loss.value)) throw NumericError("training loss diverged");
      loss_sum += loss.value;
      ++n_batches;
      zero_grads(dec.params());
      std::vector<Tensor> skip_grads;
      dec.backward(loss.grad, skip_grads);
      for (auto* p : dec.params())
        sgd_step(*p, static_cast<float>(lr), static_cast<float>(opt.momentum), opt.nesterov);
    }
    epoch_losses.push_back(n_batches ? loss_sum / n_batches : 0.0);
  }
  return epoch_losses;
}

Tensor predict_labels(Encoder& enc, Decoder& dec, const Tensor& volume, const std::vector<int>& subset) {
  Tensor probs = forward_segment(enc, dec, volume);
  const auto& s = probs.shape();
  const int K = s[1];
  const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
  Tensor out({s[2], s[3], s[4]});
  for (std::int64_t j = 0; j < spatial; ++j) {
    int best = 0;
    float bv = probs[j];
    for (int c = 1; c < K; ++c)
      if (probs[c * spatial + j] > bv) {
        bv = probs[c * spatial + j];
        best = c;
      }
    out[j] = best == 0 ? 0.0f : static_cast<float>(subset[static_cast<std::size_t>(best - 1)]);
  }
  return out;
}

double mean_foreground_dsc(Encoder& enc, Decoder& dec, const PhantomDataset& ds, const std::vector<int>& indices) {
  const auto& subset = ds.spec.labeled_subset;
  std::vector<double> per_class(subset.size(), 0.0);
  for (int idx : indices) {
    const PhantomSample& s = ds.samples[static_cast<std::size_t>(idx)];
    Tensor pred = predict_labels(enc, dec, s.image, subset);
    for (std::size_t c = 0; c < subset.size(); ++c) {
      Tensor pm(pred.shape()), gm(pred.shape());
      for (std::int64_t j = 0; j < pred.numel(); ++j) {
        pm[j] = pred[j] == static_cast<float>(subset[c]) ? 1.0f : 0.0f;
        gm[j] = s.labels[j] == static_cast<float>(subset[c]) ? 1.0f : 0.0f;
      }
      per_class[c] += dice(pm, gm);
    }
  }
  double mean = 0.0;
  for (double v : per_class) mean += v / static_cast<double>(indices.size());
  return mean / static_cast<double>(subset.size());
}

std::vector<ClassMetrics> evaluate_class_metrics(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts,
                                                 const std::vector<int>& classes, std::array<double, 3> spacing) {
  if (preds.size() != gts.size() || preds.empty()) throw Error("evaluate_class_metrics: bad sample lists");
  std::vector<ClassMetrics> out;
  for (int cls : classes) {
    ClassMetrics m;
    m.cls = cls;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      Tensor pm(preds[i].shape()), gm(preds[i].shape());
      for (std::int64_t j = 0; j < pm.numel(); ++j) {
        pm[j] = preds[i][j] == static_cast<float>(cls) ? 1.0f : 0.0f;
        gm[j] = gts[i][j] == static_cast<float>(cls) ? 1.0f : 0.0f;
      }
      m.dsc += dice(pm, gm);
      m.hd95_mm += hd95(pm, gm, spacing).mm;
      m.asd_mm += asd(pm, gm, spacing).mm;
    }
    const double n = static_cast<double>(preds.size());
    m.dsc /= n;
    m.hd95_mm /= n;
    m.asd_mm /= n;
    out.push_back(m);
  }
  return out;
}

}  // namespace cseg

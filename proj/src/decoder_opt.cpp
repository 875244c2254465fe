#include "cseg/decoder_opt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace cseg {

MixedDecoder::MixedDecoder(const std::vector<int>& encoder_widths, int n_classes, Rng rng) {
  const int levels = static_cast<int>(encoder_widths.size());
  for (int b = 0; b < levels - 1; ++b) {
    const int deep_c = encoder_widths[static_cast<std::size_t>(levels - 1 - b)];
    const int skip_c = encoder_widths[static_cast<std::size_t>(levels - 2 - b)];
    ups_.emplace_back(2);
    blocks_.emplace_back(deep_c + skip_c, skip_c, rng.fork(static_cast<std::uint64_t>(b) + 1));
  }
  head_ = Conv<float>(KernelSpec{KernelKind::Projection, encoder_widths[0], n_classes + 1}, rng.fork(1000));
}

Tensor MixedDecoder::forward(const std::vector<Tensor>& feats, Mode mode) {
  Tensor cur = feats.back();
  skip_channels_.clear();
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    Tensor up = ups_[b].forward(cur, mode);
    const Tensor& skip = feats[feats.size() - 2 - b];
    skip_channels_.push_back(up.extent(1));
    cur = blocks_[b].forward(concat_channels(up, skip), mode);
  }
  Tensor logits = head_.forward(cur, mode);
  return softmax_.forward(logits, mode);
}

void MixedDecoder::backward(const Tensor& grad_probs) {
  Tensor g = softmax_.backward(grad_probs);
  g = head_.backward(g);
  for (int b = static_cast<int>(blocks_.size()) - 1; b >= 0; --b) {
    g = blocks_[static_cast<std::size_t>(b)].backward(g);
    auto [g_up, g_skip] = split_channels(g, skip_channels_[static_cast<std::size_t>(b)]);
    g = ups_[static_cast<std::size_t>(b)].backward(g_up);
  }
}

std::vector<Param<float>*> MixedDecoder::network_params() {
  std::vector<Param<float>*> out;
  for (auto& b : blocks_)
    for (auto* p : b.branch_params()) out.push_back(p);
  for (auto* p : head_.params()) out.push_back(p);
  return out;
}

std::vector<Param<float>*> MixedDecoder::arch_params() {
  std::vector<Param<float>*> out;
  for (auto& b : blocks_) out.push_back(&b.arch_logits());
  return out;
}

std::vector<KernelKind> MixedDecoder::assignment() const {
  std::vector<KernelKind> out;
  for (const auto& b : blocks_) out.push_back(b.selected());
  return out;
}

std::vector<std::array<double, 4>> MixedDecoder::mixtures() const {
  std::vector<std::array<double, 4>> out;
  for (const auto& b : blocks_) out.push_back(b.mixture());
  return out;
}

namespace {

// One pass over `indices` updating the given parameter subset.
double mixed_pass(Encoder& enc, MixedDecoder& dec, const PhantomDataset& ds, const std::vector<int>& indices,
                  const std::vector<int>& local, std::vector<Param<float>*> step_params, double lr,
                  const OptimOptions& opt, Rng& rng, std::uint64_t tag, int epoch) {
  std::vector<int> order = indices;
  rng.fork(mix_seed(tag, static_cast<std::uint64_t>(epoch))).shuffle(order);
  double loss_sum = 0.0;
  int n_batches = 0;
  for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(opt.batch)) {
    std::vector<PhantomSample> staged;
    std::vector<const PhantomSample*> ptrs;
    for (std::size_t k = pos; k < std::min(order.size(), pos + static_cast<std::size_t>(opt.batch)); ++k) {
      const PhantomSample& s = ds.samples[static_cast<std::size_t>(order[k])];
      if (opt.augment) {
        Rng aug = rng.fork(mix_seed(tag * 31 + static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(order[k])));
        staged.push_back(augment_with(s, sample_augment_params(aug), aug.fork(1)));
      } else {
        staged.push_back(s);
      }
    }
    for (const auto& s : staged) ptrs.push_back(&s);
    Batch batch = make_batch(ptrs, local);
    auto feats = enc.forward(batch.volumes, Mode::Eval);
    Tensor probs = dec.forward(feats, Mode::Train);
    ensure_finite(probs, "mixed decoder forward");
    auto loss = dice_ce_loss(probs, batch.labels);
    if (!std::isfinite(loss.value)) throw NumericError("NAS training loss diverged");
    loss_sum += loss.value;
    ++n_batches;
    // zero every gradient (mixed backward writes both groups), step only one
    zero_grads(dec.network_params());
    zero_grads(dec.arch_params());
    dec.backward(loss.grad);
    for (auto* p : step_params)
      sgd_step(*p, static_cast<float>(lr), static_cast<float>(opt.momentum), opt.nesterov);
  }
  return n_batches ? loss_sum / n_batches : 0.0;
}

}  // namespace

NasResult nas_search(Encoder& frozen_encoder, const PhantomDataset& ds, const NasOptions& opt, std::uint64_t seed) {
  if (!frozen_encoder.frozen()) throw StageOrderError("nas_search requires a frozen encoder");
  Rng rng(seed);
  // 60/30/10 split of the non-test portion
  std::vector<int> pool = ds.split.train;
  pool.insert(pool.end(), ds.split.val.begin(), ds.split.val.end());
  std::sort(pool.begin(), pool.end());
  SplitIndices nas_split = split_dataset(static_cast<int>(pool.size()), {0.6, 0.3, 0.1}, rng.fork(1).seed());
  auto pick = [&](const std::vector<int>& rel) {
    std::vector<int> out;
    for (int r : rel) out.push_back(pool[static_cast<std::size_t>(r)]);
    return out;
  };
  const std::vector<int> train_idx = pick(nas_split.train);
  const std::vector<int> arch_idx = pick(nas_split.val);

  const auto local = local_channel_map(ds.spec.labeled_subset, ds.spec.world.registry.num_foreground());
  MixedDecoder mixed(frozen_encoder.widths(), static_cast<int>(ds.spec.labeled_subset.size()), rng.fork(2));

  const int warmup = static_cast<int>(std::lround(opt.epochs * opt.warmup_frac));
  std::vector<std::uint64_t> warmup_checksums;
  for (auto* p : mixed.arch_params()) warmup_checksums.push_back(checksum(p->value));
  for (int e = 0; e < opt.epochs; ++e) {
    const double lr = poly_lr(opt.net.lr0, e, opt.epochs, opt.net.poly_power);
    mixed_pass(frozen_encoder, mixed, ds, train_idx, local, mixed.network_params(), lr, opt.net, rng, 11, e);
    if (e >= warmup) {
      const double alr = poly_lr(opt.arch_lr, e, opt.epochs, opt.net.poly_power);
      mixed_pass(frozen_encoder, mixed, ds, arch_idx, local, mixed.arch_params(), alr, opt.net, rng, 13, e);
    }
  }

  NasResult result;
  result.assignment = mixed.assignment();
  result.final_mixtures = mixed.mixtures();

  // retrain the searched path from scratch on a 4:1 re-split
  SplitIndices retrain_split = split_dataset(static_cast<int>(pool.size()), {0.8, 0.2, 0.0}, rng.fork(3).seed());
  result.retrain_train = pick(retrain_split.train);
  result.retrain_val = pick(retrain_split.val);
  result.decoder = build_decoder(frozen_encoder, static_cast<int>(ds.spec.labeled_subset.size()),
                                 result.assignment, rng.fork(4).seed());
  OptimOptions ropt = opt.net;
  train_decoder(frozen_encoder, result.decoder, ds, result.retrain_train, opt.retrain_epochs, ropt,
                rng.fork(5));
  return result;
}

Block distill_block(const Block& teacher, const std::vector<Tensor>& inputs, const std::vector<Tensor>& targets,
                    int epochs, const OptimOptions& opt, Rng rng) {
  if (inputs.size() != targets.size() || inputs.empty()) throw Error("distill_block: bad stream");
  Block teacher_copy = teacher;  // value copy; caller keeps the real teacher untouched
  const KernelSpec tspec = std::get<Conv<float>>(teacher_copy.layers.at(0)).spec();
  Block student = make_decoding_block<float>(KernelKind::Projection, tspec.in_channels, tspec.out_channels,
                                             rng.fork(1));
  // the student must realize one fixed function: freeze its norm statistics
  // so train mode and eval mode agree (gamma/beta absorb the affine)
  set_block_frozen_stats(student, true);
  for (int e = 0; e < epochs; ++e) {
    const double lr = poly_lr(opt.lr0, e, epochs, opt.poly_power);
    std::vector<int> order(inputs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.fork(100 + static_cast<std::uint64_t>(e)).shuffle(order);
    for (int idx : order) {
      Tensor y = student.forward(inputs[static_cast<std::size_t>(idx)], Mode::Train);
      const Tensor& t = targets[static_cast<std::size_t>(idx)];
      if (!y.same_shape(t)) throw ShapeError("distill_block: student output shape mismatch");
      Tensor g(y.shape());
      const double n = static_cast<double>(y.numel());
      double mse = 0.0;
      for (std::int64_t i = 0; i < y.numel(); ++i) {
        const double d = static_cast<double>(y[i]) - static_cast<double>(t[i]);
        mse += d * d;
        g[i] = static_cast<float>(2.0 * d / n);
      }
      if (!std::isfinite(mse)) throw NumericError("distillation diverged");
      zero_grads(student.params());
      student.backward(g);
      for (auto* p : student.params())
        sgd_step(*p, static_cast<float>(lr), static_cast<float>(opt.momentum), opt.nesterov);
    }
  }
  return student;
}

BlockStreams collect_block_streams(Encoder& enc, Decoder& teacher, const PhantomDataset& ds,
                                   const std::vector<int>& indices) {
  BlockStreams out;
  out.inputs.resize(static_cast<std::size_t>(teacher.n_blocks()));
  out.targets.resize(static_cast<std::size_t>(teacher.n_blocks()));
  for (int idx : indices) {
    const PhantomSample& s = ds.samples[static_cast<std::size_t>(idx)];
    Tensor x({1, 1, s.image.extent(0), s.image.extent(1), s.image.extent(2)}, s.image.raw());
    auto feats = enc.forward(x, Mode::Eval);
    auto taps = teacher.forward_collect(feats);
    for (int b = 0; b < teacher.n_blocks(); ++b) {
      out.inputs[static_cast<std::size_t>(b)].push_back(std::move(taps.block_in[static_cast<std::size_t>(b)]));
      out.targets[static_cast<std::size_t>(b)].push_back(std::move(taps.block_out[static_cast<std::size_t>(b)]));
    }
  }
  return out;
}

Decoder assemble_path(const Decoder& teacher, const std::vector<Block>& students, std::uint32_t mask) {
  Decoder out = teacher;
  for (std::size_t b = 0; b < students.size(); ++b)
    if (mask & (1u << b)) out.blocks()[b] = students[b];
  return out;
}

std::vector<PruneCandidate> enumerate_paths(Encoder& enc, const Decoder& teacher, const std::vector<Block>& students,
                                            const PhantomDataset& ds, const std::vector<int>& val_indices) {
  if (static_cast<int>(students.size()) != teacher.n_blocks())
    throw ConfigError("enumerate_paths needs one student per block");
  const std::uint32_t n_paths = 1u << students.size();
  std::vector<PruneCandidate> out;
  out.reserve(n_paths);
  for (std::uint32_t mask = 0; mask < n_paths; ++mask) {
    Decoder candidate = assemble_path(teacher, students, mask);
    PruneCandidate c;
    c.mask = mask;
    c.params = param_count<float>(candidate.params());
    c.dsc = mean_foreground_dsc(enc, candidate, ds, val_indices);
    out.push_back(c);
  }
  return out;
}

PruneReport select_pruned_path(const std::vector<PruneCandidate>& candidates, double baseline_dsc, double tau) {
  if (tau <= 0.0 || tau >= 1.0) throw ConfigError("tau must lie in (0,1)");
  if (candidates.empty()) throw Error("select_pruned_path: no candidates");
  PruneReport report;
  report.baseline_dsc = baseline_dsc;
  report.tau = tau;
  report.table = candidates;
  const double threshold = (1.0 - tau) * baseline_dsc;
  PruneCandidate* best = nullptr;
  for (auto& c : report.table) {
    c.feasible = c.dsc >= threshold;
    c.selected = false;
    if (!c.feasible) continue;
    if (best == nullptr || c.params < best->params ||
        (c.params == best->params && (c.dsc > best->dsc || (c.dsc == best->dsc && c.mask < best->mask))))
      best = &c;
  }
  if (best == nullptr) {
    report.no_prune = true;
    report.selected_mask = 0;
    for (auto& c : report.table)
      if (c.mask == 0) c.selected = true;
  } else {
    report.selected_mask = best->mask;
    best->selected = true;
    report.no_prune = (best->mask == 0);
  }
  return report;
}

void write_prune_report_csv(const std::string& path, const PruneReport& report, int n_blocks) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "mask,dsc,params,feasible,selected\n";
  os.precision(17);
  for (const auto& c : report.table) {
    std::string bits(static_cast<std::size_t>(n_blocks), '0');
    for (int b = 0; b < n_blocks; ++b)
      if (c.mask & (1u << b)) bits[static_cast<std::size_t>(b)] = '1';
    os << bits << ',' << c.dsc << ',' << c.params << ',' << (c.feasible ? 1 : 0) << ',' << (c.selected ? 1 : 0)
       << '\n';
  }
  os << "# baseline=" << report.baseline_dsc << " tau=" << report.tau << " no_prune=" << (report.no_prune ? 1 : 0)
     << "\n";
}

}  // namespace cseg

#include "cseg/css.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cseg/checkpoint.hpp"

namespace cseg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct AuxBatch {
  Tensor bp_labels;   // (B,1,D,H,W) part index, 0 where outside
  Tensor bp_mask;     // (B,1,D,H,W) 1 inside the body
  Tensor anom_labels; // (B,1,D,H,W) 0/1
};

AuxBatch make_aux_batch(const std::vector<const PhantomSample*>& samples) {
  const auto& s0 = samples[0]->image.shape();
  const int B = static_cast<int>(samples.size());
  AuxBatch out;
  out.bp_labels = Tensor({B, 1, s0[0], s0[1], s0[2]});
  out.bp_mask = Tensor({B, 1, s0[0], s0[1], s0[2]});
  out.anom_labels = Tensor({B, 1, s0[0], s0[1], s0[2]});
  const std::int64_t spatial = static_cast<std::int64_t>(s0[0]) * s0[1] * s0[2];
  for (int n = 0; n < B; ++n) {
    const PhantomSample& s = *samples[static_cast<std::size_t>(n)];
    for (std::int64_t j = 0; j < spatial; ++j) {
      const float bp = s.body_parts[j];
      out.bp_labels[n * spatial + j] = bp >= 0.0f ? bp : 0.0f;
      out.bp_mask[n * spatial + j] = bp >= 0.0f ? 1.0f : 0.0f;
      out.anom_labels[n * spatial + j] = s.anomaly[j];
    }
  }
  return out;
}

BodyPartDistribution dataset_distribution(const PhantomDataset& ds) {
  std::vector<const Tensor*> labels, bps;
  std::vector<int> pool = ds.split.train;
  pool.insert(pool.end(), ds.split.val.begin(), ds.split.val.end());
  for (int idx : pool) {
    labels.push_back(&ds.samples[static_cast<std::size_t>(idx)].labels);
    bps.push_back(&ds.samples[static_cast<std::size_t>(idx)].body_parts);
  }
  return compute_distribution(labels, bps, ds.spec.world.n_body_parts);
}

}  // namespace

BaseResult train_base(const PhantomDataset& d1, const CssOptions& opt, std::uint64_t seed) {
  Rng rng(seed);
  BaseResult out;
  out.encoder = build_encoder<float>(opt.encoder_widths, rng.fork(1).seed());
  const int n_classes = static_cast<int>(d1.spec.labeled_subset.size());
  out.task.decoder = build_decoder(out.encoder, n_classes,
                                   std::vector<KernelKind>(opt.encoder_widths.size() - 1, KernelKind::Conv3D),
                                   rng.fork(2).seed());
  out.aux = attach_aux_heads(out.encoder, d1.spec.world.n_body_parts, rng.fork(3));

  const auto local = local_channel_map(d1.spec.labeled_subset, d1.spec.world.registry.num_foreground());
  const int epochs = opt.epochs.base;
  for (int e = 0; e < epochs; ++e) {
    const double lr = poly_lr(opt.optim.lr0, e, epochs, opt.optim.poly_power);
    std::vector<int> order = d1.split.train;
    rng.fork(1000 + static_cast<std::uint64_t>(e)).shuffle(order);
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(opt.optim.batch)) {
      std::vector<PhantomSample> staged;
      for (std::size_t k = pos; k < std::min(order.size(), pos + static_cast<std::size_t>(opt.optim.batch)); ++k) {
        const PhantomSample& s = d1.samples[static_cast<std::size_t>(order[k])];
        if (opt.optim.augment) {
          Rng aug = rng.fork(mix_seed(static_cast<std::uint64_t>(e), 7700 + static_cast<std::uint64_t>(order[k])));
          staged.push_back(augment_with(s, sample_augment_params(aug), aug.fork(1)));
        } else {
          staged.push_back(s);
        }
      }
      std::vector<const PhantomSample*> ptrs;
      for (const auto& s : staged) ptrs.push_back(&s);
      Batch batch = make_batch(ptrs, local);
      AuxBatch auxb = make_aux_batch(ptrs);

      auto feats = out.encoder.forward(batch.volumes, Mode::Train);
      Tensor probs = out.task.decoder.forward(feats, Mode::Train);
      ensure_finite(probs, "base decoder forward");
      Tensor bp_probs = out.aux.body_part.forward(feats, Mode::Train);
      Tensor an_probs = out.aux.anomaly.forward(feats, Mode::Train);

      auto seg_loss = dice_ce_loss(probs, batch.labels);
      auto bp_loss = dice_ce_loss(bp_probs, auxb.bp_labels, &auxb.bp_mask, /*fg_start=*/0);
      auto an_loss = dice_ce_loss(an_probs, auxb.anom_labels);
      const double total =
          seg_loss.value + opt.aux_weight * bp_loss.value + opt.aux_weight * an_loss.value;
      if (!std::isfinite(total)) throw NumericError("base training loss diverged");

      zero_grads(out.encoder.params());
      zero_grads(out.task.decoder.params());
      zero_grads(out.aux.params());

      std::vector<Tensor> skip_grads;
      Tensor deep = out.task.decoder.backward(seg_loss.grad, skip_grads);
      bp_loss.grad.array() *= static_cast<float>(opt.aux_weight);
      an_loss.grad.array() *= static_cast<float>(opt.aux_weight);
      auto bp_feat_grads = out.aux.body_part.backward(bp_loss.grad);
      auto an_feat_grads = out.aux.anomaly.backward(an_loss.grad);
      for (std::size_t l = 0; l < bp_feat_grads.size(); ++l) {
        if (l + 1 == bp_feat_grads.size()) {
          deep.array() += bp_feat_grads[l].array();
          deep.array() += an_feat_grads[l].array();
        } else {
          if (skip_grads[l].empty()) skip_grads[l] = Tensor(bp_feat_grads[l].shape());
          skip_grads[l].array() += bp_feat_grads[l].array();
          skip_grads[l].array() += an_feat_grads[l].array();
        }
      }
      out.encoder.backward(deep, skip_grads);

      const float flr = static_cast<float>(lr);
      const float mom = static_cast<float>(opt.optim.momentum);
      for (auto* p : out.encoder.params()) sgd_step(*p, flr, mom, opt.optim.nesterov);
      for (auto* p : out.task.decoder.params()) sgd_step(*p, flr, mom, opt.optim.nesterov);
      for (auto* p : out.aux.params()) sgd_step(*p, flr, mom, opt.optim.nesterov);
    }
  }

  out.encoder.freeze();
  out.aux.freeze();

  out.task.dataset_id = d1.spec.dataset_id;
  out.task.subset = d1.spec.labeled_subset;
  out.task.nas_assignment = std::vector<KernelKind>(opt.encoder_widths.size() - 1, KernelKind::Conv3D);
  out.task.prune_mask = 0;
  out.task.no_prune = true;
  out.task.distribution = dataset_distribution(d1);
  out.task.snapshot = evaluate_task(out.encoder, out.task, d1);

  std::vector<const Tensor*> anomalies;
  std::vector<int> pool = d1.split.train;
  pool.insert(pool.end(), d1.split.val.begin(), d1.split.val.end());
  for (int idx : pool) anomalies.push_back(&d1.samples[static_cast<std::size_t>(idx)].anomaly);
  out.anomaly_sigma = anomaly_equivalent_diameter(anomalies) / 2.0;
  return out;
}

TaskState continual_step(Encoder& frozen_encoder, const PhantomDataset& dt, const CssOptions& opt,
                         std::uint64_t seed) {
  if (!frozen_encoder.frozen()) throw StageOrderError("continual_step requires a frozen encoder");
  Rng rng(seed);
  const std::uint64_t enc_before = params_checksum<float>(frozen_encoder.params());

  NasOptions nas_opt;
  nas_opt.epochs = opt.epochs.nas;
  nas_opt.retrain_epochs = opt.epochs.retrain;
  nas_opt.net = opt.optim;
  nas_opt.arch_lr = opt.arch_lr;
  NasResult nas = nas_search(frozen_encoder, dt, nas_opt, rng.fork(1).seed());

  TaskState task;
  task.dataset_id = dt.spec.dataset_id;
  task.subset = dt.spec.labeled_subset;
  task.nas_assignment = nas.assignment;
  task.decoder = std::move(nas.decoder);

  if (opt.prune) {
    BlockStreams streams = collect_block_streams(frozen_encoder, task.decoder, dt, nas.retrain_train);
    std::vector<Block> students;
    for (int b = 0; b < task.decoder.n_blocks(); ++b) {
      // deepest block first, then progressively shallower ones
      students.push_back(distill_block(task.decoder.blocks()[static_cast<std::size_t>(b)],
                                       streams.inputs[static_cast<std::size_t>(b)],
                                       streams.targets[static_cast<std::size_t>(b)], opt.epochs.distill,
                                       opt.distill_optim, rng.fork(100 + static_cast<std::uint64_t>(b))));
    }
    auto candidates = enumerate_paths(frozen_encoder, task.decoder, students, dt, nas.retrain_val);
    task.prune_report = select_pruned_path(candidates, candidates[0].dsc, opt.tau);
    task.prune_mask = task.prune_report.selected_mask;
    task.no_prune = task.prune_report.no_prune;
    if (task.prune_mask != 0) {
      task.decoder = assemble_path(task.decoder, students, task.prune_mask);
      OptimOptions ft = opt.optim;
      ft.lr0 = opt.finetune_lr;
      train_decoder(frozen_encoder, task.decoder, dt, nas.retrain_train, opt.epochs.finetune, ft, rng.fork(7));
    }
  } else {
    task.prune_mask = 0;
    task.no_prune = true;
  }

  task.distribution = dataset_distribution(dt);
  task.snapshot = evaluate_task(frozen_encoder, task, dt);

  if (params_checksum<float>(frozen_encoder.params()) != enc_before)
    throw Error("continual_step mutated the frozen encoder");
  return task;
}

std::vector<ClassMetrics> evaluate_task(Encoder& enc, TaskState& task, const PhantomDataset& ds) {
  std::vector<Tensor> preds, gts;
  for (int idx : ds.split.test) {
    const PhantomSample& s = ds.samples[static_cast<std::size_t>(idx)];
    preds.push_back(predict_labels(enc, task.decoder, s.image, task.subset));
    gts.push_back(s.labels);
  }
  return evaluate_class_metrics(preds, gts, task.subset, ds.spec.world.spacing_mm);
}

// ---------------------------------------------------------------------------
// baselines

BaselineMode baseline_mode_from_name(const std::string& s) {
  if (s == "finetune") return BaselineMode::Finetune;
  if (s == "mib") return BaselineMode::Mib;
  if (s == "plop") return BaselineMode::Plop;
  if (s == "ilt") return BaselineMode::Ilt;
  throw ConfigError("unknown baseline mode: " + s);
}

const char* baseline_mode_name(BaselineMode m) {
  switch (m) {
    case BaselineMode::Finetune: return "finetune";
    case BaselineMode::Mib: return "mib";
    case BaselineMode::Plop: return "plop";
    case BaselineMode::Ilt: return "ilt";
  }
  return "?";
}

std::vector<std::uint8_t> BaselineModel::active_mask() const {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n_global) + 1, 0);
  mask[0] = 1;
  for (int c : seen) mask[static_cast<std::size_t>(c)] = 1;
  return mask;
}

namespace {

// One shared-model training epoch pass; loss terms depend on the mode.
void baseline_train_epochs(BaselineModel& model, const PhantomDataset& ds, BaselineMode mode,
                           const BaselineModel* old_model, const std::set<int>& old_classes,
                           const std::set<int>& new_classes, const std::set<int>& overlap, int epochs,
                           const CssOptions& opt, Rng rng) {
  const bool encoder_trainable = !model.encoder.frozen();
  std::vector<std::uint8_t> active = model.active_mask();
  model.decoder.softmax().set_active(active);

  // old model runs with its own (smaller) active set
  BaselineModel old_copy;
  if (old_model) {
    old_copy = *old_model;
    old_copy.decoder.softmax().set_active(old_copy.active_mask());
    old_copy.decoder.set_collect_taps(mode == BaselineMode::Plop);
  }
  model.decoder.set_collect_taps(mode == BaselineMode::Plop);

  // identity label map: baseline heads are in global id space already
  std::vector<int> identity(static_cast<std::size_t>(model.n_global) + 1);
  for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = static_cast<int>(i);

  for (int e = 0; e < epochs; ++e) {
    const double lr = poly_lr(opt.optim.lr0, e, epochs, opt.optim.poly_power);
    std::vector<int> order = ds.split.train;
    rng.fork(3000 + static_cast<std::uint64_t>(e)).shuffle(order);
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(opt.optim.batch)) {
      std::vector<PhantomSample> staged;
      for (std::size_t k = pos; k < std::min(order.size(), pos + static_cast<std::size_t>(opt.optim.batch)); ++k) {
        const PhantomSample& s = ds.samples[static_cast<std::size_t>(order[k])];
        if (opt.optim.augment) {
          Rng aug = rng.fork(mix_seed(static_cast<std::uint64_t>(e), 9900 + static_cast<std::uint64_t>(order[k])));
          staged.push_back(augment_with(s, sample_augment_params(aug), aug.fork(1)));
        } else {
          staged.push_back(s);
        }
      }
      std::vector<const PhantomSample*> ptrs;
      for (const auto& s : staged) ptrs.push_back(&s);
      Batch batch = make_batch(ptrs, identity);

      auto feats = model.encoder.forward(batch.volumes, encoder_trainable ? Mode::Train : Mode::Eval);
      Tensor probs = model.decoder.forward(feats, Mode::Train);
      ensure_finite(probs, "baseline forward");

      LossValue loss;
      std::vector<Tensor> pod_block_grads;
      std::vector<Tensor> pod_feat_grads;
      double total = 0.0;
      if (mode == BaselineMode::Finetune) {
        loss = dice_ce_loss(probs, batch.labels, static_cast<const Tensor*>(nullptr), 1, &active);
        total = loss.value;
      } else {
        // mib / ilt / plop share the unbiased CE; mib & ilt add unbiased KD
        loss = unce_loss(probs, batch.labels, old_classes, new_classes, overlap);
        total = loss.value;
        if (old_model && (mode == BaselineMode::Mib || mode == BaselineMode::Ilt)) {
          auto old_feats = old_copy.encoder.forward(batch.volumes, Mode::Eval);
          Tensor old_probs = old_copy.decoder.forward(old_feats, Mode::Eval);
          auto kd = unkd_loss(probs, old_probs, old_classes, new_classes, overlap, kDefaultUnkdWeight);
          loss.grad.array() += kd.grad.array();
          total += kd.value;
        }
        if (old_model && mode == BaselineMode::Plop) {
          auto old_feats = old_copy.encoder.forward(batch.volumes, Mode::Eval);
          old_copy.decoder.forward(old_feats, Mode::Eval);
          const std::vector<int> scales = {1, 2};
          pod_feat_grads.resize(feats.size());
          pod_block_grads.resize(model.decoder.taps().size());
          for (std::size_t l = 0; l < feats.size(); ++l) {
            auto target = local_pod_3d(old_feats[l], scales);
            auto pod = pod_mse_loss(feats[l], target, scales, kDefaultPodFactor);
            total += pod.value;
            pod_feat_grads[l] = std::move(pod.grad_features);
          }
          for (std::size_t b = 0; b < model.decoder.taps().size(); ++b) {
            auto target = local_pod_3d(old_copy.decoder.taps()[b], scales);
            auto pod = pod_mse_loss(model.decoder.taps()[b], target, scales, kDefaultPodFactor);
            total += pod.value;
            pod_block_grads[b] = std::move(pod.grad_features);
          }
        }
      }
      if (!std::isfinite(total)) throw NumericError("baseline training loss diverged");

      if (encoder_trainable) zero_grads(model.encoder.params());
      zero_grads(model.decoder.params());
      std::vector<Tensor> skip_grads;
      Tensor deep = model.decoder.backward(loss.grad, skip_grads,
                                           pod_block_grads.empty() ? nullptr : &pod_block_grads);
      if (encoder_trainable) {
        if (!pod_feat_grads.empty()) {
          for (std::size_t l = 0; l + 1 < pod_feat_grads.size(); ++l) {
            if (skip_grads[l].empty()) skip_grads[l] = Tensor(pod_feat_grads[l].shape());
            skip_grads[l].array() += pod_feat_grads[l].array();
          }
          deep.array() += pod_feat_grads.back().array();
        }
        model.encoder.backward(deep, skip_grads);
        for (auto* p : model.encoder.params())
          sgd_step(*p, static_cast<float>(lr), static_cast<float>(opt.optim.momentum), opt.optim.nesterov);
      }
      for (auto* p : model.decoder.params())
        sgd_step(*p, static_cast<float>(lr), static_cast<float>(opt.optim.momentum), opt.optim.nesterov);
    }
  }
  model.decoder.set_collect_taps(false);
}

}  // namespace

BaselineModel baseline_init(const PhantomDataset& d1, BaselineMode mode, const CssOptions& opt,
                            std::uint64_t seed) {
  Rng rng(seed);
  BaselineModel model;
  model.n_global = d1.spec.world.registry.num_foreground();
  model.encoder = build_encoder<float>(opt.encoder_widths, rng.fork(1).seed());
  model.decoder = build_decoder(model.encoder, model.n_global,
                                std::vector<KernelKind>(opt.encoder_widths.size() - 1, KernelKind::Conv3D),
                                rng.fork(2).seed());
  model.seen = d1.spec.labeled_subset;
  baseline_train_epochs(model, d1, BaselineMode::Finetune, nullptr, {}, {}, {}, opt.epochs.base, opt,
                        rng.fork(3));
  if (mode == BaselineMode::Ilt) model.encoder.freeze();
  return model;
}

void baseline_step(BaselineModel& model, const PhantomDataset& dt, BaselineMode mode, const CssOptions& opt,
                   std::uint64_t seed) {
  Rng rng(seed);
  const std::set<int> old_classes(model.seen.begin(), model.seen.end());
  const std::set<int> new_classes(dt.spec.labeled_subset.begin(), dt.spec.labeled_subset.end());
  std::set<int> overlap;
  for (int c : new_classes)
    if (old_classes.count(c)) overlap.insert(c);

  BaselineModel old_model = model;  // pre-step snapshot for distillation
  for (int c : dt.spec.labeled_subset)
    if (!old_classes.count(c)) model.seen.push_back(c);
  std::sort(model.seen.begin(), model.seen.end());

  const BaselineModel* old_ptr = (mode == BaselineMode::Finetune) ? nullptr : &old_model;
  baseline_train_epochs(model, dt, mode, old_ptr, old_classes, new_classes, overlap, opt.epochs.baseline_step,
                        opt, rng.fork(1));
}

std::vector<ClassMetrics> evaluate_baseline(BaselineModel& model, const PhantomDataset& ds) {
  model.decoder.softmax().set_active(model.active_mask());
  std::vector<int> identity_subset(static_cast<std::size_t>(model.n_global));
  for (int c = 1; c <= model.n_global; ++c) identity_subset[static_cast<std::size_t>(c - 1)] = c;
  std::vector<Tensor> preds, gts;
  for (int idx : ds.split.test) {
    const PhantomSample& s = ds.samples[static_cast<std::size_t>(idx)];
    preds.push_back(predict_labels(model.encoder, model.decoder, s.image, identity_subset));
    gts.push_back(s.labels);
  }
  return evaluate_class_metrics(preds, gts, ds.spec.labeled_subset, ds.spec.world.spacing_mm);
}

// ---------------------------------------------------------------------------
// state on disk

namespace {

json distribution_to_json(const BodyPartDistribution& d) {
  return json{{"fractions", d.fractions},
              {"avg_bbox_extent", d.avg_bbox_extent},
              {"n_samples_used", d.n_samples_used}};
}

BodyPartDistribution distribution_from_json(const json& j) {
  BodyPartDistribution d;
  d.fractions = j.at("fractions").get<std::vector<double>>();
  d.avg_bbox_extent = j.at("avg_bbox_extent");
  d.n_samples_used = j.at("n_samples_used");
  return d;
}

}  // namespace

void write_snapshot_csv(const std::string& path, const std::vector<ClassMetrics>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "class,dsc,hd95_mm,asd_mm\n";
  os.precision(17);
  for (const auto& r : rows) os << r.cls << ',' << r.dsc << ',' << r.hd95_mm << ',' << r.asd_mm << '\n';
}

std::vector<ClassMetrics> read_snapshot_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::string line;
  std::getline(is, line);
  std::vector<ClassMetrics> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    ClassMetrics r;
    std::istringstream ls(line);
    std::string field;
    std::getline(ls, field, ',');
    r.cls = std::stoi(field);
    std::getline(ls, field, ',');
    r.dsc = std::stod(field);
    std::getline(ls, field, ',');
    r.hd95_mm = std::stod(field);
    std::getline(ls, field, ',');
    r.asd_mm = std::stod(field);
    rows.push_back(r);
  }
  return rows;
}

void save_state(const std::string& dir, Framework& fw) {
  fs::create_directories(dir);
  save_encoder((fs::path(dir) / "encoder.ckpt").string(), fw.encoder);
  save_aux((fs::path(dir) / "aux.ckpt").string(), fw.aux, fw.encoder.widths());
  json st;
  st["plan"] = fw.plan;
  st["master_seed"] = fw.master_seed;
  st["anomaly_sigma"] = fw.anomaly_sigma;
  st["completed_steps"] = fw.tasks.size();
  {
    std::ofstream os(fs::path(dir) / "state.json");
    if (!os) throw IoError("cannot write state.json");
    os << st.dump(2) << "\n";
  }
  for (std::size_t t = 0; t < fw.tasks.size(); ++t) {
    TaskState& task = fw.tasks[t];
    const fs::path tdir = fs::path(dir) / ("task_" + std::to_string(t + 1));
    fs::create_directories(tdir);
    save_decoder((tdir / "decoder.ckpt").string(), task.decoder, fw.encoder.widths());
    write_snapshot_csv((tdir / "snapshot.csv").string(), task.snapshot);
    json meta;
    meta["dataset_id"] = task.dataset_id;
    meta["subset"] = task.subset;
    std::vector<std::string> kinds;
    for (KernelKind k : task.nas_assignment) kinds.push_back(kernel_kind_name(k));
    meta["nas_assignment"] = kinds;
    meta["prune_mask"] = task.prune_mask;
    meta["no_prune"] = task.no_prune;
    meta["distribution"] = distribution_to_json(task.distribution);
    std::ofstream os(tdir / "meta.json");
    if (!os) throw IoError("cannot write task meta");
    os << meta.dump(2) << "\n";
  }
}

bool state_has_base(const std::string& dir) { return fs::exists(fs::path(dir) / "encoder.ckpt"); }

int state_completed_steps(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "state.json")) return 0;
  std::ifstream is(fs::path(dir) / "state.json");
  json st = json::parse(is);
  return static_cast<int>(st.at("completed_steps").get<std::size_t>());
}

Framework load_state(const std::string& dir) {
  if (!state_has_base(dir)) throw StageOrderError("no trained state in " + dir + " (run train-base first)");
  Framework fw;
  fw.encoder = load_encoder((fs::path(dir) / "encoder.ckpt").string());
  fw.aux = load_aux((fs::path(dir) / "aux.ckpt").string());
  std::ifstream is(fs::path(dir) / "state.json");
  if (!is) throw IoError("cannot read state.json in " + dir);
  json st = json::parse(is);
  fw.plan = st.at("plan").get<std::vector<int>>();
  fw.master_seed = st.at("master_seed");
  fw.anomaly_sigma = st.at("anomaly_sigma");
  const auto n = st.at("completed_steps").get<std::size_t>();
  for (std::size_t t = 0; t < n; ++t) {
    const fs::path tdir = fs::path(dir) / ("task_" + std::to_string(t + 1));
    TaskState task;
    task.decoder = load_decoder((tdir / "decoder.ckpt").string());
    task.snapshot = read_snapshot_csv((tdir / "snapshot.csv").string());
    std::ifstream ms(tdir / "meta.json");
    if (!ms) throw IoError("cannot read task meta in " + tdir.string());
    json meta = json::parse(ms);
    task.dataset_id = meta.at("dataset_id");
    task.subset = meta.at("subset").get<std::vector<int>>();
    for (const auto& k : meta.at("nas_assignment")) task.nas_assignment.push_back(kernel_kind_from_name(k));
    task.prune_mask = meta.at("prune_mask");
    task.no_prune = meta.at("no_prune");
    task.distribution = distribution_from_json(meta.at("distribution"));
    fw.tasks.push_back(std::move(task));
  }
  return fw;
}

// ---------------------------------------------------------------------------
// merge plumbing

Tensor anomaly_probability(Encoder& enc, AuxHeads& aux, const Tensor& volume, double anomaly_sigma) {
  Tensor x = volume.rank() == 3
                 ? Tensor({1, 1, volume.extent(0), volume.extent(1), volume.extent(2)}, volume.raw())
                 : volume;
  auto feats = enc.forward(x, Mode::Eval);
  Tensor probs = aux.anomaly.forward(feats, Mode::Eval);
  const auto& s = probs.shape();
  const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
  Tensor out({s[2], s[3], s[4]});
  std::copy_n(probs.data() + spatial, spatial, out.data());  // channel 1 = anomaly
  return gaussian_smooth(out, {anomaly_sigma, anomaly_sigma, anomaly_sigma});
}

Tensor predict_body_parts(Encoder& enc, AuxHeads& aux, const Tensor& volume) {
  Tensor x = volume.rank() == 3
                 ? Tensor({1, 1, volume.extent(0), volume.extent(1), volume.extent(2)}, volume.raw())
                 : volume;
  auto feats = enc.forward(x, Mode::Eval);
  Tensor probs = aux.body_part.forward(feats, Mode::Eval);
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
    out[j] = static_cast<float>(best);
  }
  return out;
}

MergeContext make_merge_context(Encoder& enc, TaskState& task, const Tensor& volume, const Tensor& bp_map,
                                const Tensor& anomaly_smoothed, WeightingForm form) {
  Tensor probs = forward_segment(enc, task.decoder, volume);
  const auto& s = probs.shape();
  const int K = s[1];
  const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];

  MergeContext ctx;
  ctx.dataset_id = task.dataset_id;
  ctx.pred_class_global = Tensor({s[2], s[3], s[4]});
  Tensor confidence({s[2], s[3], s[4]});
  for (std::int64_t j = 0; j < spatial; ++j) {
    int best = 0;
    float bv = probs[j];
    for (int c = 1; c < K; ++c)
      if (probs[c * spatial + j] > bv) {
        bv = probs[c * spatial + j];
        best = c;
      }
    ctx.pred_class_global[j] =
        best == 0 ? 0.0f : static_cast<float>(task.subset[static_cast<std::size_t>(best - 1)]);
    confidence[j] = bv;
  }
  Tensor coverage = rasterize_coverage(task.distribution, bp_map, /*smooth=*/true);
  // smoothing can carry tiny numeric overshoots; the weighting map is strict
  for (std::int64_t j = 0; j < coverage.numel(); ++j)
    coverage[j] = std::min(1.0f, std::max(0.0f, coverage[j]));
  Tensor weight = weighting_map(coverage, anomaly_smoothed, form);
  ctx.conf_entropy = confidence_map(weight, confidence);
  return ctx;
}

}  // namespace cseg

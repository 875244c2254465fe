#include "cseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

namespace cseg {

using nlohmann::json;

const std::vector<int>& ClassRegistry::subset(int dataset_id) const {
  auto it = subsets.find(dataset_id);
  if (it == subsets.end()) throw ConfigError("unknown dataset id " + std::to_string(dataset_id));
  return it->second;
}

std::vector<int> ClassRegistry::overlap(int dataset_a, int dataset_b) const {
  const auto& a = subset(dataset_a);
  const auto& b = subset(dataset_b);
  std::vector<int> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

std::set<int> ClassRegistry::overlap_with_any(int dataset_id) const {
  std::set<int> out;
  for (const auto& [other, _] : subsets) {
    if (other == dataset_id) continue;
    for (int c : overlap(dataset_id, other)) out.insert(c);
  }
  return out;
}

void ClassRegistry::validate() const {
  if (names.empty() || names[0] != "background") throw ConfigError("registry must start with background");
  for (const auto& [id, sub] : subsets) {
    for (int c : sub) {
      if (c <= 0 || c >= static_cast<int>(names.size()))
        throw ConfigError("dataset " + std::to_string(id) + " labels unknown class " + std::to_string(c));
    }
    if (!std::is_sorted(sub.begin(), sub.end())) throw ConfigError("subset must be sorted");
  }
}

namespace {

struct PlacedOrgan {
  const OrganDef* def;
  std::array<double, 3> center;  // (d, h, w)
  std::array<double, 3> radius;
  double intensity;
};

struct BodyGeometry {
  int D, H, W, parts;
  double ch, cw, rh, rw;  // elliptic cross-section of the body

  bool inside_body(int h, int w) const {
    const double dh = (h - ch) / rh, dw = (w - cw) / rw;
    return dh * dh + dw * dw <= 1.0;
  }
  int part_of(int d) const { return d * parts / D; }
};

BodyGeometry geometry_of(const WorldSpec& world) {
  BodyGeometry g;
  g.D = world.extents[0];
  g.H = world.extents[1];
  g.W = world.extents[2];
  g.parts = world.n_body_parts;
  g.ch = (g.H - 1) / 2.0;
  g.cw = (g.W - 1) / 2.0;
  g.rh = g.H / 2.0 - 2.0;
  g.rw = g.W / 2.0 - 2.0;
  return g;
}

bool boxes_intersect(const PlacedOrgan& a, const PlacedOrgan& b) {
  for (int ax = 0; ax < 3; ++ax)
    if (std::fabs(a.center[ax] - b.center[ax]) > a.radius[ax] + b.radius[ax]) return false;
  return true;
}

PlacedOrgan place_organ(const OrganDef& def, const BodyGeometry& geo, const std::vector<PlacedOrgan>& placed,
                        Rng& rng) {
  const double band_lo = static_cast<double>(def.body_part) * geo.D / geo.parts;
  const double band_hi = static_cast<double>(def.body_part + 1) * geo.D / geo.parts;
  for (int attempt = 0; attempt < 200; ++attempt) {
    PlacedOrgan o;
    o.def = &def;
    o.radius[0] = rng.uniform(def.radius_d[0], def.radius_d[1]);
    o.radius[1] = rng.uniform(def.radius_hw[0], def.radius_hw[1]);
    o.radius[2] = rng.uniform(def.radius_hw[0], def.radius_hw[1]);
    o.intensity = rng.uniform(def.intensity[0], def.intensity[1]);
    if (band_hi - band_lo < 2.0 * o.radius[0] + 1.0) continue;
    o.center[0] = rng.uniform(band_lo + o.radius[0] + 0.5, band_hi - o.radius[0] - 0.5);
    o.center[1] = rng.uniform(geo.ch - geo.rh + o.radius[1] + 1.0, geo.ch + geo.rh - o.radius[1] - 1.0);
    o.center[2] = rng.uniform(geo.cw - geo.rw + o.radius[2] + 1.0, geo.cw + geo.rw - o.radius[2] - 1.0);
    // organ must stay inside the body cross-section
    const double eh = (std::fabs(o.center[1] - geo.ch) + o.radius[1]) / geo.rh;
    const double ew = (std::fabs(o.center[2] - geo.cw) + o.radius[2]) / geo.rw;
    if (eh * eh + ew * ew > 1.0) continue;
    bool clash = false;
    for (const auto& p : placed)
      if (boxes_intersect(o, p)) {
        clash = true;
        break;
      }
    if (!clash) return o;
  }
  throw Error("organ for class " + std::to_string(def.class_id) + " cannot fit its body part after max retries");
}

}  // namespace

Tensor make_body_part_map(const WorldSpec& world) {
  const BodyGeometry geo = geometry_of(world);
  Tensor bp({geo.D, geo.H, geo.W});
  for (int d = 0; d < geo.D; ++d)
    for (int h = 0; h < geo.H; ++h)
      for (int w = 0; w < geo.W; ++w)
        bp.at3(d, h, w) = geo.inside_body(h, w) ? static_cast<float>(geo.part_of(d)) : -1.0f;
  return bp;
}

PhantomSample generate_sample(const PhantomSpec& spec, int index) {
  const BodyGeometry geo = geometry_of(spec.world);
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  PhantomSample s;
  s.image = Tensor({geo.D, geo.H, geo.W});
  s.labels = Tensor({geo.D, geo.H, geo.W});
  s.anomaly = Tensor({geo.D, geo.H, geo.W});
  s.body_parts = make_body_part_map(spec.world);

  // background: air outside the body, soft tissue inside
  for (int d = 0; d < geo.D; ++d)
    for (int h = 0; h < geo.H; ++h)
      for (int w = 0; w < geo.W; ++w) {
        const bool inside = geo.inside_body(h, w);
        s.image.at3(d, h, w) = static_cast<float>(inside ? rng.normal(0.20, 0.02) : rng.normal(0.05, 0.01));
      }

  std::vector<PlacedOrgan> placed;
  for (const auto& def : spec.world.organs) placed.push_back(place_organ(def, geo, placed, rng));

  const std::set<int> labeled(spec.labeled_subset.begin(), spec.labeled_subset.end());
  for (const auto& o : placed) {
    const bool is_labeled = labeled.count(o.def->class_id) != 0;
    const int d0 = std::max(0, static_cast<int>(std::floor(o.center[0] - o.radius[0])));
    const int d1 = std::min(geo.D - 1, static_cast<int>(std::ceil(o.center[0] + o.radius[0])));
    const int h0 = std::max(0, static_cast<int>(std::floor(o.center[1] - o.radius[1])));
    const int h1 = std::min(geo.H - 1, static_cast<int>(std::ceil(o.center[1] + o.radius[1])));
    const int w0 = std::max(0, static_cast<int>(std::floor(o.center[2] - o.radius[2])));
    const int w1 = std::min(geo.W - 1, static_cast<int>(std::ceil(o.center[2] + o.radius[2])));
    for (int d = d0; d <= d1; ++d)
      for (int h = h0; h <= h1; ++h)
        for (int w = w0; w <= w1; ++w) {
          const double rd = (d - o.center[0]) / o.radius[0];
          const double rh = (h - o.center[1]) / o.radius[1];
          const double rw = (w - o.center[2]) / o.radius[2];
          const double rho2 = rd * rd + rh * rh + rw * rw;
          if (rho2 > 1.0) continue;
          s.image.at3(d, h, w) = static_cast<float>(o.intensity * (1.0 - 0.3 * rho2) + rng.normal(0.0, 0.01));
          if (is_labeled) s.labels.at3(d, h, w) = static_cast<float>(o.def->class_id);
        }
  }

  // anomaly: a bright blob fully inside a labeled host organ
  if (!spec.anomaly_host_classes.empty() && rng.bernoulli(spec.anomaly_rate)) {
    std::vector<const PlacedOrgan*> hosts;
    for (const auto& o : placed)
      for (int host_class : spec.anomaly_host_classes)
        if (o.def->class_id == host_class && labeled.count(host_class)) hosts.push_back(&o);
    if (!hosts.empty()) {
      const PlacedOrgan& host = *hosts[static_cast<std::size_t>(rng.index(hosts.size()))];
      const double ar = rng.uniform(spec.anomaly_radius[0], spec.anomaly_radius[1]);
      std::array<double, 3> ac;
      for (int ax = 0; ax < 3; ++ax)
        ac[ax] = host.center[ax] + rng.uniform(-0.3, 0.3) * host.radius[ax];
      const int d0 = std::max(0, static_cast<int>(std::floor(ac[0] - ar)));
      const int d1 = std::min(geo.D - 1, static_cast<int>(std::ceil(ac[0] + ar)));
      for (int d = d0; d <= d1; ++d)
        for (int h = std::max(0, static_cast<int>(ac[1] - ar)); h <= std::min(geo.H - 1, static_cast<int>(ac[1] + ar)); ++h)
          for (int w = std::max(0, static_cast<int>(ac[2] - ar)); w <= std::min(geo.W - 1, static_cast<int>(ac[2] + ar)); ++w) {
            const double dd = (d - ac[0]) / ar, dh = (h - ac[1]) / ar, dw = (w - ac[2]) / ar;
            if (dd * dd + dh * dh + dw * dw > 1.0) continue;
            // clip to the host organ so containment holds exactly
            if (s.labels.at3(d, h, w) != static_cast<float>(host.def->class_id)) continue;
            s.image.at3(d, h, w) = static_cast<float>(1.0 + rng.normal(0.0, 0.01));
            s.anomaly.at3(d, h, w) = 1.0f;
          }
    }
  }
  return s;
}

PhantomDataset generate_dataset(const PhantomSpec& spec) {
  spec.world.registry.validate();
  PhantomDataset d;
  d.spec = spec;
  d.samples.reserve(static_cast<std::size_t>(spec.sample_count));
  for (int i = 0; i < spec.sample_count; ++i) d.samples.push_back(generate_sample(spec, i));
  d.split = split_dataset(spec.sample_count, {0.64, 0.16, 0.20}, mix_seed(spec.seed, 0x5f17));
  return d;
}

SplitIndices split_dataset(int n_samples, std::array<double, 3> ratios, std::uint64_t seed) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::fabs(sum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  std::vector<int> idx(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(idx);

  std::array<int, 3> counts{};
  std::array<double, 3> frac{};
  int assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double want = ratios[static_cast<std::size_t>(k)] * n_samples;
    counts[static_cast<std::size_t>(k)] = static_cast<int>(std::floor(want + 1e-9));
    frac[static_cast<std::size_t>(k)] = want - counts[static_cast<std::size_t>(k)];
    assigned += counts[static_cast<std::size_t>(k)];
  }
  for (int r = assigned; r < n_samples; ++r) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (frac[static_cast<std::size_t>(k)] > frac[static_cast<std::size_t>(best)] + 1e-12) best = k;
    counts[static_cast<std::size_t>(best)] += 1;
    frac[static_cast<std::size_t>(best)] = -1.0;
  }
  for (int k = 0; k < 3; ++k)
    if (ratios[static_cast<std::size_t>(k)] > 0.0 && counts[static_cast<std::size_t>(k)] == 0)
      throw Error("split with positive ratio rounded to zero samples");

  SplitIndices s;
  auto take = [&](std::vector<int>& dst, int n, int& pos) {
    for (int i = 0; i < n; ++i) dst.push_back(idx[static_cast<std::size_t>(pos++)]);
    std::sort(dst.begin(), dst.end());
  };
  int pos = 0;
  take(s.train, counts[0], pos);
  take(s.val, counts[1], pos);
  take(s.test, counts[2], pos);
  return s;
}

AugmentParams sample_augment_params(Rng& rng) {
  AugmentParams p;
  p.flip_width = rng.bernoulli(0.5);
  p.intensity_scale = rng.uniform(0.75, 1.25);
  p.noise_sd = rng.uniform(0.0, 0.1);
  return p;
}

namespace {

Tensor flip_width_axis(const Tensor& t) {
  const auto& s = t.shape();
  Tensor out(s);
  const int D = s[0], H = s[1], W = s[2];
  for (int d = 0; d < D; ++d)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) out.at3(d, h, w) = t.at3(d, h, W - 1 - w);
  return out;
}

}  // namespace

PhantomSample augment_with(const PhantomSample& s, const AugmentParams& p, Rng noise_rng) {
  PhantomSample out;
  if (p.flip_width) {
    out.image = flip_width_axis(s.image);
    out.labels = flip_width_axis(s.labels);
    out.body_parts = flip_width_axis(s.body_parts);
    out.anomaly = flip_width_axis(s.anomaly);
  } else {
    out = s;
  }
  if (p.intensity_scale != 1.0)
    out.image.array() *= static_cast<float>(p.intensity_scale);
  if (p.noise_sd > 0.0)
    for (std::int64_t i = 0; i < out.image.numel(); ++i)
      out.image[i] += static_cast<float>(noise_rng.normal(0.0, p.noise_sd));
  return out;
}

PhantomSample augment(const PhantomSample& s, std::uint64_t seed) {
  Rng rng(seed);
  AugmentParams p = sample_augment_params(rng);
  return augment_with(s, p, rng.fork(1));
}

// ---------------------------------------------------------------------------
// disk layout

namespace {

json registry_to_json(const ClassRegistry& r) {
  json j;
  j["names"] = r.names;
  json subs = json::object();
  for (const auto& [id, sub] : r.subsets) subs[std::to_string(id)] = sub;
  j["subsets"] = subs;
  return j;
}

ClassRegistry registry_from_json(const json& j) {
  ClassRegistry r;
  r.names = j.at("names").get<std::vector<std::string>>();
  for (const auto& [key, val] : j.at("subsets").items())
    r.subsets[std::stoi(key)] = val.get<std::vector<int>>();
  return r;
}

json organ_to_json(const OrganDef& o) {
  return json{{"class_id", o.class_id},
              {"body_part", o.body_part},
              {"radius_d", o.radius_d},
              {"radius_hw", o.radius_hw},
              {"intensity", o.intensity}};
}

OrganDef organ_from_json(const json& j) {
  OrganDef o;
  o.class_id = j.at("class_id");
  o.body_part = j.at("body_part");
  o.radius_d = j.at("radius_d");
  o.radius_hw = j.at("radius_hw");
  o.intensity = j.at("intensity");
  return o;
}

json world_to_json(const WorldSpec& w) {
  json j;
  j["extents"] = w.extents;
  j["spacing_mm"] = w.spacing_mm;
  j["n_body_parts"] = w.n_body_parts;
  j["registry"] = registry_to_json(w.registry);
  json organs = json::array();
  for (const auto& o : w.organs) organs.push_back(organ_to_json(o));
  j["organs"] = organs;
  return j;
}

WorldSpec world_from_json(const json& j) {
  WorldSpec w;
  w.extents = j.at("extents");
  w.spacing_mm = j.at("spacing_mm");
  w.n_body_parts = j.at("n_body_parts");
  w.registry = registry_from_json(j.at("registry"));
  for (const auto& oj : j.at("organs")) w.organs.push_back(organ_from_json(oj));
  return w;
}

}  // namespace

void save_dataset(const std::string& dir, const PhantomDataset& d) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json j;
  j["name"] = d.spec.name;
  j["dataset_id"] = d.spec.dataset_id;
  j["labeled_subset"] = d.spec.labeled_subset;
  j["anomaly_rate"] = d.spec.anomaly_rate;
  j["anomaly_radius"] = d.spec.anomaly_radius;
  j["anomaly_host_classes"] = d.spec.anomaly_host_classes;
  j["sample_count"] = d.spec.sample_count;
  j["seed"] = d.spec.seed;
  j["world"] = world_to_json(d.spec.world);
  j["split"] = json{{"train", d.split.train}, {"val", d.split.val}, {"test", d.split.test}};
  std::ofstream mf(fs::path(dir) / "manifest");
  if (!mf) throw IoError("cannot write manifest in " + dir);
  mf << j.dump(2) << "\n";
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const std::string base = (fs::path(dir) / std::to_string(i)).string();
    save_tensor(base + ".img", d.samples[i].image);
    save_tensor(base + ".lbl", d.samples[i].labels);
    save_tensor(base + ".bp", d.samples[i].body_parts);
    save_tensor(base + ".anom", d.samples[i].anomaly);
  }
}

PhantomDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest");
  if (!mf) throw IoError("cannot read manifest in " + dir);
  json j = json::parse(mf);
  PhantomDataset d;
  d.spec.name = j.at("name");
  d.spec.dataset_id = j.at("dataset_id");
  d.spec.labeled_subset = j.at("labeled_subset").get<std::vector<int>>();
  d.spec.anomaly_rate = j.at("anomaly_rate");
  d.spec.anomaly_radius = j.at("anomaly_radius");
  d.spec.anomaly_host_classes = j.at("anomaly_host_classes").get<std::vector<int>>();
  d.spec.sample_count = j.at("sample_count");
  d.spec.seed = j.at("seed");
  d.spec.world = world_from_json(j.at("world"));
  d.split.train = j.at("split").at("train").get<std::vector<int>>();
  d.split.val = j.at("split").at("val").get<std::vector<int>>();
  d.split.test = j.at("split").at("test").get<std::vector<int>>();
  for (int i = 0; i < d.spec.sample_count; ++i) {
    const std::string base = (fs::path(dir) / std::to_string(i)).string();
    PhantomSample s;
    s.image = load_tensor(base + ".img");
    s.labels = load_tensor(base + ".lbl");
    s.body_parts = load_tensor(base + ".bp");
    s.anomaly = load_tensor(base + ".anom");
    d.samples.push_back(std::move(s));
  }
  return d;
}

// ---------------------------------------------------------------------------
// default desk-scale world

WorldSpec default_world() {
  WorldSpec w;
  w.extents = {32, 32, 32};
  w.spacing_mm = {1.0, 1.0, 1.0};
  w.n_body_parts = 4;
  w.registry.names = {"background", "organ_01", "organ_02", "organ_03", "organ_04", "organ_05", "organ_06",
                      "organ_07",   "organ_08", "organ_09", "organ_10", "organ_11", "organ_12"};
  w.registry.subsets[1] = {1, 2, 3, 4, 5, 6};
  w.registry.subsets[2] = {3, 4, 7, 8, 9};
  w.registry.subsets[3] = {10, 11, 12};
  w.registry.subsets[4] = {4};

  auto organ = [](int cls, int part) {
    OrganDef o;
    o.class_id = cls;
    o.body_part = part;
    o.radius_d = {2.0, 3.0};
    o.radius_hw = {2.5, 4.0};
    const double mean = 0.30 + 0.05 * cls;
    o.intensity = {mean - 0.015, mean + 0.015};
    return o;
  };
  // dataset 1 spans every part; dataset 2 sits in parts 1-2; dataset 3 in
  // part 0; dataset 4 relabels class 4 in part 2
  w.organs = {
      organ(1, 0), organ(2, 1), organ(3, 1),  organ(4, 2),  organ(5, 2),  organ(6, 3),
      organ(7, 1), organ(8, 2), organ(9, 2),  organ(10, 0), organ(11, 0), organ(12, 0),
  };
  return w;
}

std::vector<PhantomSpec> default_dataset_specs(std::uint64_t master_seed) {
  WorldSpec world = default_world();
  auto make = [&](int id, const std::string& name, std::vector<int> subset, int count, double anomaly_rate,
                  std::vector<int> hosts) {
    PhantomSpec s;
    s.world = world;
    s.dataset_id = id;
    s.name = name;
    s.labeled_subset = std::move(subset);
    s.sample_count = count;
    s.anomaly_rate = anomaly_rate;
    s.anomaly_host_classes = std::move(hosts);
    s.seed = mix_seed(master_seed, static_cast<std::uint64_t>(id));
    return s;
  };
  return {
      make(1, "base", {1, 2, 3, 4, 5, 6}, 24, 0.25, {2, 4, 5}),
      make(2, "thorax", {3, 4, 7, 8, 9}, 16, 0.0, {}),
      make(3, "head", {10, 11, 12}, 16, 0.0, {}),
      make(4, "eso", {4}, 16, 1.0, {4}),
  };
}

}  // namespace cseg

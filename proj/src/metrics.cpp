#include "cseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace cseg {

double dice(const Tensor& pred, const Tensor& gt) {
  if (!pred.same_shape(gt)) throw ShapeError("dice: mask extents differ");
  std::int64_t a = 0, b = 0, inter = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] != 0.0f;
    const bool g = gt[i] != 0.0f;
    a += p;
    b += g;
    inter += (p && g);
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

namespace {

struct Point {
  double x[3];
};

// Surface voxels: foreground with at least one face-adjacent background
// neighbor; voxels touching the volume border count as surface.
std::vector<Point> surface_points(const Tensor& mask, const std::array<double, 3>& spacing) {
  if (mask.rank() != 3) throw ShapeError("surface extraction expects rank-3 masks");
  const int D = mask.extent(0), H = mask.extent(1), W = mask.extent(2);
  auto fg = [&](int d, int h, int w) {
    if (d < 0 || d >= D || h < 0 || h >= H || w < 0 || w >= W) return false;
    return mask.at3(d, h, w) != 0.0f;
  };
  std::vector<Point> pts;
  for (int d = 0; d < D; ++d)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        if (!fg(d, h, w)) continue;
        const bool boundary = !fg(d - 1, h, w) || !fg(d + 1, h, w) || !fg(d, h - 1, w) || !fg(d, h + 1, w) ||
                              !fg(d, h, w - 1) || !fg(d, h, w + 1);
        if (boundary) pts.push_back({{d * spacing[0], h * spacing[1], w * spacing[2]}});
      }
  return pts;
}

void nearest_distances(const std::vector<Point>& from, const std::vector<Point>& to, std::vector<double>& out) {
  for (const auto& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : to) {
      const double dx = a.x[0] - b.x[0], dy = a.x[1] - b.x[1], dz = a.x[2] - b.x[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    out.push_back(std::sqrt(best));
  }
}

double diagonal_mm(const Tensor& mask, const std::array<double, 3>& spacing) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double e = mask.extent(a) * spacing[static_cast<std::size_t>(a)];
    s += e * e;
  }
  return std::sqrt(s);
}

// Pooled symmetric distances; empty return means sentinel applies.
std::vector<double> symmetric_surface_distances(const Tensor& pred, const Tensor& gt,
                                                const std::array<double, 3>& spacing) {
  if (!pred.same_shape(gt)) throw ShapeError("surface distance: mask extents differ");
  auto sp = surface_points(pred, spacing);
  auto sg = surface_points(gt, spacing);
  if (sp.empty() || sg.empty()) return {};
  std::vector<double> d;
  d.reserve(sp.size() + sg.size());
  nearest_distances(sp, sg, d);
  nearest_distances(sg, sp, d);
  return d;
}

double percentile_linear(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
}

}  // namespace

SurfaceDistance hd95(const Tensor& pred, const Tensor& gt, std::array<double, 3> spacing_mm) {
  auto d = symmetric_surface_distances(pred, gt, spacing_mm);
  if (d.empty()) return {diagonal_mm(gt, spacing_mm), true};
  return {percentile_linear(std::move(d), 0.95), false};
}

SurfaceDistance asd(const Tensor& pred, const Tensor& gt, std::array<double, 3> spacing_mm) {
  auto d = symmetric_surface_distances(pred, gt, spacing_mm);
  if (d.empty()) return {diagonal_mm(gt, spacing_mm), true};
  double sum = 0.0;
  for (double x : d) sum += x;
  return {sum / static_cast<double>(d.size()), false};
}

double forgetting_rate(double snapshot_dsc, double current_dsc) {
  if (snapshot_dsc <= 0.0) throw Error("forgetting_rate requires a positive snapshot DSC");
  const double rate = 100.0 * (snapshot_dsc - current_dsc) / snapshot_dsc;
  return rate < 0.0 ? 0.0 : rate;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "step,task,class,scope,dsc,hd95_mm,asd_mm,forget_pct\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.step << ',' << r.task << ',' << r.cls << ',' << r.scope << ',' << r.dsc << ',' << r.hd95_mm << ','
       << r.asd_mm << ',' << r.forget_pct << '\n';
  if (!os) throw IoError("metrics csv write failed: " + path);
}

std::vector<MetricRow> read_metrics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::string line;
  std::getline(is, line);  // header
  std::vector<MetricRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    MetricRow r;
    std::string field;
    std::getline(ls, field, ',');
    r.step = std::stoi(field);
    std::getline(ls, field, ',');
    r.task = std::stoi(field);
    std::getline(ls, field, ',');
    r.cls = std::stoi(field);
    std::getline(ls, r.scope, ',');
    std::getline(ls, field, ',');
    r.dsc = std::stod(field);
    std::getline(ls, field, ',');
    r.hd95_mm = std::stod(field);
    std::getline(ls, field, ',');
    r.asd_mm = std::stod(field);
    std::getline(ls, field, ',');
    r.forget_pct = std::stod(field);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace cseg

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cseg/merge.hpp"
#include "test_util.hpp"

using namespace cseg;

namespace {

Tensor constant3(int n, float v) { return Tensor::full({n, n, n}, v); }

}  // namespace

TEST_CASE("distribution: bbox inside one part") {
  // 8x4x4 volume, two parts stacked along depth
  Tensor bp({8, 4, 4});
  for (int d = 0; d < 8; ++d)
    for (int h = 0; h < 4; ++h)
      for (int w = 0; w < 4; ++w) bp.at3(d, h, w) = d < 4 ? 0.0f : 1.0f;
  Tensor lbl({8, 4, 4});
  lbl.at3(5, 1, 1) = 3.0f;
  lbl.at3(6, 2, 2) = 3.0f;
  auto dist = compute_distribution({&lbl}, {&bp}, 2);
  CHECK(dist.fractions[0] == 0.0);
  CHECK(dist.fractions[1] == 1.0);
  CHECK(dist.n_samples_used == 1);
  CHECK(dist.avg_bbox_extent[0] == doctest::Approx(2.0));
}

TEST_CASE("distribution: bbox split 75/25 across parts") {
  Tensor bp({8, 4, 4});
  for (int d = 0; d < 8; ++d)
    for (int h = 0; h < 4; ++h)
      for (int w = 0; w < 4; ++w) bp.at3(d, h, w) = d < 6 ? 1.0f : 2.0f;
  Tensor lbl({8, 4, 4});
  // bbox spans d in [3,6]: 3 slices in part 1, 1 slice in part 2
  lbl.at3(3, 0, 0) = 1.0f;
  lbl.at3(6, 3, 3) = 1.0f;
  auto dist = compute_distribution({&lbl}, {&bp}, 4);
  CHECK(dist.fractions[0] == 0.0);
  CHECK(dist.fractions[1] == doctest::Approx(0.75));
  CHECK(dist.fractions[2] == doctest::Approx(0.25));
  CHECK(dist.fractions[3] == 0.0);
}

TEST_CASE("distribution: averaged over samples, empties skipped") {
  Tensor bp({4, 2, 2});
  for (int d = 0; d < 4; ++d)
    for (int h = 0; h < 2; ++h)
      for (int w = 0; w < 2; ++w) bp.at3(d, h, w) = d < 2 ? 1.0f : 2.0f;
  Tensor a({4, 2, 2});
  a.at3(0, 0, 0) = 1.0f;
  a.at3(1, 1, 1) = 1.0f;  // fully part 1 -> (0,1,0,0)
  Tensor b({4, 2, 2});
  b.at3(0, 0, 0) = 1.0f;
  b.at3(3, 1, 1) = 1.0f;  // half part 1, half part 2 -> (0,.5,.5,0)
  Tensor empty({4, 2, 2});
  auto dist = compute_distribution({&a, &b, &empty}, {&bp, &bp, &bp}, 4);
  CHECK(dist.n_samples_used == 2);
  CHECK(dist.fractions[1] == doctest::Approx(0.75));
  CHECK(dist.fractions[2] == doctest::Approx(0.25));
}

TEST_CASE("distribution fractions sum to at most 1") {
  Tensor bp({4, 4, 4});
  bp.fill(-1.0f);  // everything outside
  for (int d = 0; d < 4; ++d) bp.at3(d, 1, 1) = static_cast<float>(d);
  Tensor lbl({4, 4, 4});
  lbl.at3(0, 0, 0) = 1.0f;
  lbl.at3(3, 3, 3) = 1.0f;
  auto dist = compute_distribution({&lbl}, {&bp}, 4);
  double sum = 0.0;
  for (double f : dist.fractions) {
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
    sum += f;
  }
  CHECK(sum <= 1.0 + 1e-6);
}

TEST_CASE("gaussian smooth: sigma 0 is bit-identical") {
  Rng rng(3);
  Tensor m = testing::random_tensor_f({5, 6, 7}, rng, 0.0f, 1.0f);
  Tensor s = gaussian_smooth(m, {0.0, 0.0, 0.0});
  CHECK(checksum(s) == checksum(m));
}

TEST_CASE("gaussian smooth: constant map stays constant") {
  Tensor m = constant3(6, 0.37f);
  Tensor s = gaussian_smooth(m, {1.5, 2.0, 0.8});
  for (std::int64_t i = 0; i < s.numel(); ++i) CHECK(s[i] == doctest::Approx(0.37).epsilon(1e-6));
}

TEST_CASE("gaussian smooth: unit impulse center value") {
  // oracle: normalized 1D kernel with taps exp(-k^2/2), k = -3..3
  double taps = 0.0;
  for (int k = -3; k <= 3; ++k) taps += std::exp(-0.5 * k * k);
  const double w0 = 1.0 / taps;
  Tensor m({9, 9, 9});
  m.at3(4, 4, 4) = 1.0f;
  Tensor s = gaussian_smooth(m, {1.0, 1.0, 1.0});
  CHECK(s.at3(4, 4, 4) == doctest::Approx(w0 * w0 * w0).epsilon(1e-5));
}

TEST_CASE("weighting map corner truth table (final form)") {
  auto eval = [](float p, float e) {
    Tensor P = constant3(2, p), E = constant3(2, e);
    return weighting_map(P, E)[0];
  };
  CHECK(eval(1.0f, 0.0f) == doctest::Approx(1.0));
  CHECK(eval(0.0f, 0.0f) == doctest::Approx(0.5));
  CHECK(eval(1.0f, 1.0f) == doctest::Approx(0.5));
  CHECK(eval(0.0f, 1.0f) == doctest::Approx(0.5));
  CHECK(eval(0.5f, 0.0f) == doctest::Approx(0.75));
}

TEST_CASE("weighting map draft form inverts the confident corner") {
  auto eval = [](float p, float e) {
    Tensor P = constant3(2, p), E = constant3(2, e);
    return weighting_map(P, E, WeightingForm::Draft)[0];
  };
  CHECK(eval(1.0f, 0.0f) == doctest::Approx(0.0));
  CHECK(eval(0.0f, 0.0f) == doctest::Approx(0.5));
  CHECK(eval(1.0f, 1.0f) == doctest::Approx(0.5));
  CHECK(eval(0.0f, 1.0f) == doctest::Approx(0.5));
}

TEST_CASE("weighting map rejects out-of-range inputs") {
  Tensor P = constant3(2, 1.5f), E = constant3(2, 0.0f);
  CHECK_THROWS_AS(weighting_map(P, E), Error);
}

TEST_CASE("confidence map values and range") {
  auto h_of = [](float m, float y) {
    Tensor M = constant3(2, m), Y = constant3(2, y);
    return confidence_map(M, Y)[0];
  };
  CHECK(h_of(1.0f, 1.0f) == doctest::Approx(0.0));
  CHECK(h_of(1.0f, 0.5f) == doctest::Approx(0.34657).epsilon(1e-4));
  CHECK(h_of(1.0f, 0.0f) == doctest::Approx(0.0));  // clamped limit
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const float h = h_of(static_cast<float>(rng.uniform(0, 1)), static_cast<float>(rng.uniform(0, 1)));
    CHECK(h >= 0.0f);
    CHECK(h <= static_cast<float>(1.0 / 2.718281828) + 1e-9f);
  }
}

TEST_CASE("merge: single task is a pure relabeling") {
  Rng rng(11);
  MergeContext c;
  c.dataset_id = 3;
  c.pred_class_global = Tensor({3, 3, 3});
  c.conf_entropy = testing::random_tensor_f({3, 3, 3}, rng, 0.0f, 0.3f);
  for (std::int64_t i = 0; i < 27; ++i) c.pred_class_global[i] = static_cast<float>(rng.index(5));
  auto r = merge_predictions({c});
  CHECK(checksum(r.labels) == checksum(c.pred_class_global));
  CHECK(r.dataset_ids == std::vector<int>({3}));
}

TEST_CASE("merge: smaller entropy wins") {
  MergeContext a, b;
  a.dataset_id = 1;
  b.dataset_id = 2;
  a.pred_class_global = constant3(2, 4.0f);
  b.pred_class_global = constant3(2, 9.0f);
  a.conf_entropy = constant3(2, 0.30f);
  b.conf_entropy = constant3(2, 0.10f);
  auto r = merge_predictions({a, b});
  for (std::int64_t i = 0; i < 8; ++i) CHECK(r.labels[i] == 9.0f);
  CHECK(r.win_counts[0] == 0);
  CHECK(r.win_counts[1] == 8);
}

TEST_CASE("merge: no foreground anywhere gives background") {
  MergeContext a;
  a.dataset_id = 1;
  a.pred_class_global = constant3(2, 0.0f);
  a.conf_entropy = constant3(2, 0.0f);
  auto r = merge_predictions({a});
  for (std::int64_t i = 0; i < 8; ++i) CHECK(r.labels[i] == 0.0f);
}

TEST_CASE("merge: ties break to the lowest dataset id regardless of order") {
  MergeContext a, b;
  a.dataset_id = 2;
  b.dataset_id = 1;
  a.pred_class_global = constant3(2, 5.0f);
  b.pred_class_global = constant3(2, 7.0f);
  a.conf_entropy = constant3(2, 0.25f);
  b.conf_entropy = constant3(2, 0.25f);
  auto r1 = merge_predictions({a, b});
  auto r2 = merge_predictions({b, a});
  CHECK(checksum(r1.labels) == checksum(r2.labels));
  for (std::int64_t i = 0; i < 8; ++i) CHECK(r1.labels[i] == 7.0f);  // dataset 1 wins ties
}

TEST_CASE("merge matches the scalar brute-force oracle on random micro volumes") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const int n = 2 + static_cast<int>(rng.index(3));  // 2..4 per axis
    const int T = 3;
    std::vector<MergeContext> ctxs;
    std::vector<Tensor> coverage, anomaly, conf;
    for (int t = 0; t < T; ++t) {
      Tensor P = testing::random_tensor_f({n, n, n}, rng, 0.0f, 1.0f);
      Tensor E = testing::random_tensor_f({n, n, n}, rng, 0.0f, 1.0f);
      Tensor Y = testing::random_tensor_f({n, n, n}, rng, 0.0f, 1.0f);
      MergeContext c;
      c.dataset_id = t + 1;
      c.pred_class_global = Tensor({n, n, n});
      for (std::int64_t i = 0; i < c.pred_class_global.numel(); ++i)
        c.pred_class_global[i] = static_cast<float>(rng.index(4));  // 0..3, 0 = background
      c.conf_entropy = confidence_map(weighting_map(P, E), Y);
      coverage.push_back(P);
      anomaly.push_back(E);
      conf.push_back(Y);
      ctxs.push_back(std::move(c));
    }
    auto result = merge_predictions(ctxs);

    // scalar re-derivation straight from the formulas
    for (std::int64_t j = 0; j < result.labels.numel(); ++j) {
      float best_label = 0.0f;
      double best_h = std::numeric_limits<double>::infinity();
      for (int t = 0; t < T; ++t) {
        if (ctxs[static_cast<std::size_t>(t)].pred_class_global[j] == 0.0f) continue;
        const double m = 1.0 - 0.5 * (1.0 - coverage[static_cast<std::size_t>(t)][j] +
                                      anomaly[static_cast<std::size_t>(t)][j] * coverage[static_cast<std::size_t>(t)][j]);
        double x = m * conf[static_cast<std::size_t>(t)][j];
        x = std::min(1.0, std::max(1e-12, x));
        const double h = static_cast<float>(-x * std::log(x));
        if (h < best_h) {
          best_h = h;
          best_label = ctxs[static_cast<std::size_t>(t)].pred_class_global[j];
        }
      }
      CHECK(result.labels[j] == best_label);
    }
  }
}

TEST_CASE("raising the anomaly never decreases the weighting map's pull toward 0.5") {
  // dM/de = -P/2 in the final form: anomaly evidence always moves M toward
  // the uncertain corner.
  Rng rng(76);
  for (int trial = 0; trial < 200; ++trial) {
    const float p = static_cast<float>(rng.uniform(0.0, 1.0));
    const float e1 = static_cast<float>(rng.uniform(0.0, 1.0));
    const float e2 = static_cast<float>(rng.uniform(e1, 1.0));
    Tensor P = constant3(1, p);
    const float m1 = weighting_map(P, constant3(1, e1))[0];
    const float m2 = weighting_map(P, constant3(1, e2))[0];
    CHECK(m2 <= m1 + 1e-7f);
  }
}

TEST_CASE("anomaly monotonicity: raising the anomaly never helps a prediction win") {
  // H = -x log x is decreasing above 1/e and increasing below it, so the
  // direction splits by form: with the final form and x = M*Y kept >= 1/e
  // (strong confidence, Y >= 0.75), raising the anomaly raises the entropy;
  // with the draft form and weak confidence (Y <= 0.5 so x <= 0.25 < 1/e),
  // the same holds. Either way the argmin never flips toward that task.
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const float p = static_cast<float>(rng.uniform(0.0, 1.0));
    const float e1 = static_cast<float>(rng.uniform(0.0, 1.0));
    const float e2 = static_cast<float>(rng.uniform(e1, 1.0));
    Tensor P = constant3(1, p);

    const float y_strong = static_cast<float>(rng.uniform(0.75, 1.0));
    Tensor Ys = constant3(1, y_strong);
    const float hs1 = confidence_map(weighting_map(P, constant3(1, e1)), Ys)[0];
    const float hs2 = confidence_map(weighting_map(P, constant3(1, e2)), Ys)[0];
    CHECK(hs2 >= hs1 - 1e-7f);

    const float y_weak = static_cast<float>(rng.uniform(0.0, 0.5));
    Tensor Yw = constant3(1, y_weak);
    const float hw1 = confidence_map(weighting_map(P, constant3(1, e1), WeightingForm::Draft), Yw)[0];
    const float hw2 = confidence_map(weighting_map(P, constant3(1, e2), WeightingForm::Draft), Yw)[0];
    CHECK(hw2 >= hw1 - 1e-7f);
  }
}

TEST_CASE("rasterize coverage over a body-part map") {
  BodyPartDistribution dist;
  dist.fractions = {0.0, 0.75, 0.25, 0.0};
  dist.avg_bbox_extent = {0.0, 0.0, 0.0};  // no smoothing contribution
  Tensor bp({2, 2, 2});
  bp.fill(-1.0f);
  bp.at3(0, 0, 0) = 1.0f;
  bp.at3(1, 1, 1) = 2.0f;
  Tensor cov = rasterize_coverage(dist, bp);
  CHECK(cov.at3(0, 0, 0) == 0.75f);
  CHECK(cov.at3(1, 1, 1) == 0.25f);
  CHECK(cov.at3(0, 1, 1) == 0.0f);  // outside body
}

TEST_CASE("empty context list is an error") {
  CHECK_THROWS_AS(merge_predictions({}), Error);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "xct/common.hpp"
#include "xct/metrics.hpp"

using namespace xct;
using metrics::Mask;

namespace {

Mask random_mask(size_t n, Rng& rng, double p = 0.5) {
  Mask m(n);
  for (auto& v : m) v = rng.uniform() < p ? 1 : 0;
  return m;
}

}  // namespace

TEST_CASE("confusion_counts: trivial cases and exhaustive oracle") {
  Mask a(16, 1), b(16, 0);
  auto c = metrics::confusion_counts(a, a);
  CHECK(c.tp == 16);
  CHECK(c.fp == 0);
  CHECK(c.fn == 0);

  c = metrics::confusion_counts(a, b);  // all-ones prediction vs all-zeros truth on 4x4
  CHECK(c.fp == 16);
  CHECK(c.tp == 0);
  CHECK(c.fn == 0);
  CHECK(c.tn == 0);

  Rng rng(1);
  for (int rep = 0; rep < 10; ++rep) {
    const auto pred = random_mask(64, rng, 0.4);
    const auto truth = random_mask(64, rng, 0.3);
    const auto got = metrics::confusion_counts(pred, truth);
    const auto want = oracle::confusion_ref(pred, truth);
    CHECK(got.tp == want.tp);
    CHECK(got.fp == want.fp);
    CHECK(got.fn == want.fn);
    CHECK(got.tn == want.tn);
    CHECK(got.tp + got.fp + got.fn + got.tn == 64);
  }

  Mask small(8, 0);
  CHECK_THROWS_AS(metrics::confusion_counts(a, small), ShapeError);
}

TEST_CASE("iou and dice: hand cases and the exact identity") {
  Mask a(8, 1), b(8, 1);
  CHECK(metrics::iou(a, b) == 1.0);
  CHECK(metrics::dice(a, b) == 1.0);

  Mask c(8, 0), d(8, 0);
  c[0] = c[1] = 1;
  d[2] = d[3] = 1;  // disjoint, non-empty
  CHECK(metrics::iou(c, d) == 0.0);
  CHECK(metrics::dice(c, d) == 0.0);

  // |A ∩ B| = 2, |A ∪ B| = 6
  Mask e(10, 0), f(10, 0);
  for (int i = 0; i < 4; ++i) e[static_cast<size_t>(i)] = 1;       // A = {0,1,2,3}
  for (int i = 2; i < 6; ++i) f[static_cast<size_t>(i)] = 1;       // B = {2,3,4,5}
  const double iou = metrics::iou(e, f);
  const double dice = metrics::dice(e, f);
  CHECK(iou == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(dice == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(dice == doctest::Approx(2.0 * iou / (1.0 + iou)).epsilon(1e-12));

  CHECK(metrics::iou(Mask(5, 0), Mask(5, 0)) == 1.0);  // both empty: agreement
  CHECK(metrics::dice(Mask(5, 0), Mask(5, 0)) == 1.0);
}

TEST_CASE("dice equals 2 iou / (1 + iou) over random masks, with iou <= dice <= 1") {
  Rng rng(2);
  for (int rep = 0; rep < 50; ++rep) {
    const auto a = random_mask(48, rng, rng.uniform(0.1, 0.9));
    const auto b = random_mask(48, rng, rng.uniform(0.1, 0.9));
    const double i = metrics::iou(a, b);
    const double d = metrics::dice(a, b);
    CHECK(d == doctest::Approx(2.0 * i / (1.0 + i)).epsilon(1e-12));
    CHECK(i <= d + 1e-15);
    CHECK(d <= 1.0);
  }
}

namespace {

LabelVolume from_masks(const std::vector<Mask>& layers, int ny, int nx) {
  LabelVolume v(static_cast<int>(layers.size()), ny, nx);
  for (size_t z = 0; z < layers.size(); ++z) {
    for (size_t i = 0; i < layers[z].size(); ++i) {
      v.classes[z * layers[z].size() + i] =
          layers[z][i] ? static_cast<uint8_t>(VoxClass::pore) : 0;
    }
  }
  return v;
}

}  // namespace

TEST_CASE("layer_metrics: perfect prediction, hand case, degenerate layers") {
  // perfect prediction: every metric 1, std 0
  Rng rng(3);
  std::vector<Mask> truth_layers = {random_mask(16, rng, 0.5), random_mask(16, rng, 0.4)};
  const auto truth = from_masks(truth_layers, 4, 4);
  auto lm = metrics::layer_metrics(truth, truth, VoxClass::pore);
  CHECK(lm.n_included == 2);
  CHECK(lm.mean_precision == 1.0);
  CHECK(lm.mean_recall == 1.0);
  CHECK(lm.mean_f1 == 1.0);
  CHECK(lm.std_f1 == 0.0);

  // layer 0 perfect, layer 1 with TP=1, FP=1, FN=1 -> P=R=F1=0.5
  Mask t0(16, 0), p0(16, 0);
  t0[0] = t0[1] = 1;
  p0 = t0;
  Mask t1(16, 0), p1(16, 0);
  t1[0] = t1[1] = 1;
  p1[1] = p1[2] = 1;
  const auto tv = from_masks({t0, t1}, 4, 4);
  const auto pv = from_masks({p0, p1}, 4, 4);
  lm = metrics::layer_metrics(pv, tv, VoxClass::pore);
  CHECK(lm.mean_f1 == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(lm.std_f1 == doctest::Approx(0.25).epsilon(1e-12));  // population std
  CHECK(lm.mean_precision == doctest::Approx(0.75));
  CHECK(lm.mean_recall == doctest::Approx(0.75));

  // degenerate layer (empty truth and prediction) is excluded from the mean
  const auto tv2 = from_masks({t0, Mask(16, 0)}, 4, 4);
  const auto pv2 = from_masks({p0, Mask(16, 0)}, 4, 4);
  lm = metrics::layer_metrics(pv2, tv2, VoxClass::pore);
  CHECK(lm.n_layers == 2);
  CHECK(lm.n_included == 1);
  CHECK(lm.mean_f1 == 1.0);
  CHECK_FALSE(lm.layers[1].included);
  CHECK(lm.layers[1].pred_empty);

  // truth positives with an empty prediction score zero
  const auto pv3 = from_masks({Mask(16, 0)}, 4, 4);
  const auto tv3 = from_masks({t0}, 4, 4);
  lm = metrics::layer_metrics(pv3, tv3, VoxClass::pore);
  CHECK(lm.layers[0].included);
  CHECK(lm.layers[0].precision == 0.0);
  CHECK(lm.layers[0].recall == 0.0);
  CHECK(lm.layers[0].f1 == 0.0);
  CHECK(lm.layers[0].pred_empty);

  LabelVolume other(3, 4, 4);
  CHECK_THROWS_AS(metrics::layer_metrics(pv3, other, VoxClass::pore), ShapeError);
  CHECK_THROWS_AS(metrics::layer_metrics(tv3, tv3, static_cast<VoxClass>(9)), ConfigError);
}

TEST_CASE("per-layer F1 lies between precision and recall; aggregates recompute") {
  Rng rng(4);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<Mask> tl, pl;
    for (int z = 0; z < 6; ++z) {
      tl.push_back(random_mask(36, rng, rng.uniform(0.0, 0.6)));
      pl.push_back(random_mask(36, rng, rng.uniform(0.0, 0.6)));
    }
    const auto lm = metrics::layer_metrics(from_masks(pl, 6, 6), from_masks(tl, 6, 6),
                                           VoxClass::pore);
    double sum_f1 = 0.0;
    int n_inc = 0;
    for (const auto& e : lm.layers) {
      if (!e.included) continue;
      CHECK(e.f1 >= std::min(e.precision, e.recall) - 1e-12);
      CHECK(e.f1 <= std::max(e.precision, e.recall) + 1e-12);
      sum_f1 += e.f1;
      ++n_inc;
    }
    CHECK(n_inc == lm.n_included);
    if (n_inc > 0) {
      CHECK(lm.mean_f1 == doctest::Approx(sum_f1 / n_inc).epsilon(1e-15));
      double ss = 0.0;
      for (const auto& e : lm.layers) {
        if (e.included) ss += (e.f1 - lm.mean_f1) * (e.f1 - lm.mean_f1);
      }
      CHECK(lm.std_f1 == doctest::Approx(std::sqrt(ss / n_inc)).epsilon(1e-12));
    }
  }
}

TEST_CASE("frechet_distance: identical sets, exact-moment 1-D case") {
  Rng rng(5);
  std::vector<std::vector<double>> a;
  for (int i = 0; i < 10; ++i) a.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  CHECK(std::abs(metrics::frechet_distance(a, a)) < 1e-8);

  // unbiased sample variance of {-x, x} is 2x^2, so x = sqrt(0.5) gives unit variance
  const double x = std::sqrt(0.5);
  std::vector<std::vector<double>> m0 = {{-x}, {x}};          // mean 0, var 1
  std::vector<std::vector<double>> m1 = {{1.0 - x}, {1.0 + x}};  // mean 1, var 1
  CHECK(metrics::frechet_distance(m0, m1) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("frechet_distance: diagonal 2-D closed form") {
  // four-point sets with exact unbiased covariance diag(1,4) and diag(4,1)
  const double a = std::sqrt(1.5), b = std::sqrt(6.0);
  std::vector<std::vector<double>> s1 = {{a, 0}, {-a, 0}, {0, b}, {0, -b}};
  std::vector<std::vector<double>> s2 = {{b, 0}, {-b, 0}, {0, a}, {0, -a}};
  const double got = metrics::frechet_distance(s1, s2);
  // closed form on the eps-regularized covariances (eps = 1e-6)
  const double eps = 1e-6;
  const double want = oracle::frechet_diag_ref({0, 0}, {1 + eps, 4 + eps}, {0, 0},
                                               {4 + eps, 1 + eps});
  CHECK(got == doctest::Approx(want).epsilon(1e-9));
  CHECK(got == doctest::Approx(2.0).epsilon(1e-5));  // (1+4-2*2) + (4+1-2*2)
}

TEST_CASE("frechet_distance: symmetry and nonnegativity over random sets") {
  Rng rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<std::vector<double>> a, b;
    const size_t d = 4;
    for (int i = 0; i < 9; ++i) {
      std::vector<double> va(d), vb(d);
      for (size_t j = 0; j < d; ++j) {
        va[j] = rng.normal();
        vb[j] = 0.5 + 1.5 * rng.normal();
      }
      a.push_back(va);
      b.push_back(vb);
    }
    const double ab = metrics::frechet_distance(a, b);
    const double ba = metrics::frechet_distance(b, a);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-7));
    CHECK(ab > -1e-8);
    CHECK(std::abs(metrics::frechet_distance(a, a)) < 1e-8);
  }

  std::vector<std::vector<double>> bad = {{1.0, 2.0}, {3.0}};
  std::vector<std::vector<double>> ok = {{1.0, 2.0}, {3.0, 4.0}};
  CHECK_THROWS_AS(metrics::frechet_distance(bad, ok), ShapeError);
  CHECK_THROWS_AS(metrics::frechet_distance({{1.0}}, {{1.0}, {2.0}}), ConfigError);
}

TEST_CASE("degenerate (rank-deficient) feature sets are handled by regularization") {
  // 7 vectors in 8-D: covariance is singular; the paper-protocol crop count
  std::vector<std::vector<double>> a, b;
  Rng rng(7);
  for (int i = 0; i < 7; ++i) {
    std::vector<double> va(8), vb(8);
    for (auto& v : va) v = rng.uniform();
    for (auto& v : vb) v = rng.uniform() + 0.3;
    a.push_back(va);
    b.push_back(vb);
  }
  const double d = metrics::frechet_distance(a, b);
  CHECK(std::isfinite(d));
  CHECK(d > 0.0);
}

TEST_CASE("patch_features: paper-protocol defaults and the constant image") {
  metrics::FrechetConfig def;
  CHECK(def.n_crops == 7);
  CHECK(def.crop_size == 150);

  Image img(40, 40, 3.25);
  Mask fg(img.size(), 1);
  metrics::FrechetConfig cfg;
  cfg.n_crops = 3;
  cfg.crop_size = 16;
  const auto feats = metrics::patch_features(img, fg, cfg);
  REQUIRE(feats.size() == 3);
  for (const auto& f : feats) {
    REQUIRE(f.size() == 8);
    CHECK(f[0] == doctest::Approx(3.25).epsilon(1e-12));
    for (size_t i = 1; i < 8; ++i) CHECK(f[i] == doctest::Approx(0.0).epsilon(1e-12));
  }

  cfg.crop_size = 64;  // larger than the image
  CHECK_THROWS_AS(metrics::patch_features(img, fg, cfg), ConfigError);

  Mask tiny(img.size(), 0);
  tiny[0] = 1;
  cfg.crop_size = 16;
  CHECK_THROWS_AS(metrics::patch_features(img, tiny, cfg), ConfigError);
}

TEST_CASE("frechet patch distance grows with noise level") {
  Rng rng(8);
  Image base(48, 48);
  for (auto& v : base.data) v = 0.5 + 0.1 * rng.normal();
  Mask fg(base.size(), 1);
  metrics::FrechetConfig cfg;
  cfg.n_crops = 16;
  cfg.crop_size = 16;
  cfg.seed = 3;
  const auto ref = metrics::patch_features(base, fg, cfg);
  double prev = -1.0;
  for (double sigma : {0.01, 0.05, 0.1}) {
    Rng nrng(9);
    Image noisy = base;
    for (auto& v : noisy.data) v += sigma * nrng.normal();
    const double d = metrics::frechet_distance(ref, metrics::patch_features(noisy, fg, cfg));
    CHECK(d > prev);
    prev = d;
  }
  CHECK(prev > 0.0);
}

TEST_CASE("ssim: self-similarity, anti-correlation, constant closed form") {
  Rng rng(10);
  Image x(24, 24);
  for (auto& v : x.data) v = rng.uniform();
  CHECK(metrics::ssim(x, x, 11, 1.0) == doctest::Approx(1.0).epsilon(1e-12));

  Image cb(24, 24), inv(24, 24);
  for (int y = 0; y < 24; ++y) {
    for (int xx = 0; xx < 24; ++xx) {
      cb.at(y, xx) = (y + xx) % 2 ? 1.0 : 0.0;
      inv.at(y, xx) = 1.0 - cb.at(y, xx);
    }
  }
  CHECK(metrics::ssim(cb, inv, 11, 1.0) < 0.0);

  Image ca(16, 16, 0.6), cd(16, 16, 0.4);
  CHECK(metrics::ssim(ca, cd, 11, 1.0) ==
        doctest::Approx(oracle::ssim_const_ref(0.6, 0.4, 1.0)).epsilon(1e-12));

  Image small(8, 8);
  CHECK_THROWS_AS(metrics::ssim(small, small, 11, 1.0), ConfigError);
  Image other(24, 20);
  CHECK_THROWS_AS(metrics::ssim(x, other, 11, 1.0), ShapeError);
}

TEST_CASE("ssim symmetry and joint-shift stability") {
  Rng rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    Image x(20, 20), y(20, 20);
    for (size_t i = 0; i < x.data.size(); ++i) {
      x.data[i] = rng.uniform();
      y.data[i] = rng.uniform();
    }
    const double xy = metrics::ssim(x, y, 11, 1.0);
    const double yx = metrics::ssim(y, x, 11, 1.0);
    CHECK(xy == doctest::Approx(yx).epsilon(1e-12));

    // shifting both images by a constant: the contrast/structure terms are
    // exactly invariant; the luminance term moves only through C1, so the
    // value is stable to ~1e-3 at this dynamic range (exact when local means
    // match, e.g. y == x)
    Image xs = x, ys = y;
    for (auto& v : xs.data) v += 0.3;
    for (auto& v : ys.data) v += 0.3;
    CHECK(std::abs(metrics::ssim(xs, ys, 11, 1.0) - xy) < 2e-3);
    Image xs2 = x;
    for (auto& v : xs2.data) v += 0.3;
    CHECK(metrics::ssim(xs, xs2, 11, 1.0) == doctest::Approx(metrics::ssim(x, x, 11, 1.0)));
  }
}

TEST_CASE("cycle consistency loss: perfect cycles, constant offset, symmetry") {
  Rng rng(12);
  std::vector<Image> xs, ys;
  for (int i = 0; i < 3; ++i) {
    Image a(8, 8), b(8, 8);
    for (auto& v : a.data) v = rng.uniform();
    for (auto& v : b.data) v = rng.uniform();
    xs.push_back(a);
    ys.push_back(b);
  }
  CHECK(metrics::cycle_consistency_loss(xs, xs, ys, ys) == 0.0);

  std::vector<Image> xr = xs;
  for (auto& img : xr) {
    for (auto& v : img.data) v += 0.5;
  }
  CHECK(metrics::cycle_consistency_loss(xs, xr, ys, ys) == doctest::Approx(0.5).epsilon(1e-12));

  std::vector<Image> yr = ys;
  for (auto& img : yr) {
    for (auto& v : img.data) v -= 0.25;
  }
  const double fwd = metrics::cycle_consistency_loss(xs, xr, ys, yr);
  const double swapped = metrics::cycle_consistency_loss(ys, yr, xs, xr);
  CHECK(fwd == doctest::Approx(swapped).epsilon(1e-12));

  std::vector<Image> wrong = {Image(4, 4)};
  CHECK_THROWS_AS(metrics::cycle_consistency_loss(xs, wrong, ys, ys), ShapeError);
}

TEST_CASE("spearman rank correlation: monotone, reversed, ties") {
  CHECK(metrics::spearman_rank_correlation({1, 2, 3, 4}, {10, 20, 30, 40}) ==
        doctest::Approx(1.0));
  CHECK(metrics::spearman_rank_correlation({1, 2, 3, 4}, {9, 7, 5, 3}) == doctest::Approx(-1.0));
  // ties get average ranks
  const double rho = metrics::spearman_rank_correlation({1, 1, 2, 3}, {5, 5, 6, 7});
  CHECK(rho == doctest::Approx(1.0));
  CHECK_THROWS_AS(metrics::spearman_rank_correlation({1.0}, {2.0}), ConfigError);
}

TEST_CASE("metrics report serializes and recomputes exactly") {
  Rng rng(13);
  std::vector<Mask> tl, pl;
  for (int z = 0; z < 4; ++z) {
    tl.push_back(random_mask(25, rng, 0.3));
    pl.push_back(random_mask(25, rng, 0.3));
  }
  metrics::MetricsReport r;
  r.dataset_id = "te_x";
  r.model_id = "adapter";
  r.class_name = "pore";
  r.layers = metrics::layer_metrics(from_masks(pl, 5, 5), from_masks(tl, 5, 5), VoxClass::pore);

  const auto j = r.to_json();
  CHECK(j.at("conventions").at("empty_layer_rule") == "exclude_both_empty");
  CHECK(j.at("conventions").at("both_empty_value") == 1.0);
  const auto r2 = metrics::MetricsReport::from_json(j);
  CHECK(r2.layers.mean_f1 == r.layers.mean_f1);
  CHECK(r2.layers.layers.size() == r.layers.layers.size());

  // aggregates recompute exactly from the serialized per-layer entries
  double sum = 0.0;
  int n = 0;
  for (const auto& e : j.at("per_layer")) {
    if (e.at("included").get<bool>()) {
      sum += e.at("f1").get<double>();
      ++n;
    }
  }
  CHECK(j.at("mean").at("f1").get<double>() == doctest::Approx(sum / n).epsilon(1e-15));

  const std::string csv = r.to_csv();
  CHECK(csv.find("dataset_id,model_id,class,layer,") == 0);
  CHECK(csv.find("te_x,adapter,pore,0,") != std::string::npos);
}

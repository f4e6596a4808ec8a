#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "xct/common.hpp"
#include "xct/gradcheck.hpp"
#include "xct/metrics.hpp"
#include "xct/phantom.hpp"
#include "xct/segnet.hpp"
#include "xct/tomo.hpp"

using namespace xct;
using diff::Tape;
using diff::Tensor;
using segnet::TrainConfig;
using segnet::UNet25Config;

namespace {

UNet25Config tiny_net() {
  UNet25Config c;
  c.in_channels = 5;
  c.base_width = 4;
  c.depth = 2;
  c.n_classes = 4;
  c.patch_size = 32;
  return c;
}

segnet::SliceDataset tiny_dataset(uint64_t seed, int nz = 26) {
  phantom::PhantomSpec ps;
  ps.grid_shape = {nz, 32, 32};
  ps.part_shape = phantom::PartShape::cylinder(0.8, 1.0);
  ps.mu_material = 0.02;
  ps.mu_inclusion = 0.04;
  ps.pore_density_target = 0.04;
  ps.inclusion_density_target = 0.008;
  ps.flaw_r_min = 1.0;
  ps.flaw_r_max = 2.5;
  ps.seed = seed;
  auto gen = phantom::generate_phantom(ps);
  tomo::ScanConfig sc;
  sc.n_views = 90;
  sc.detector_bins = 48;
  sc.noise = tomo::NoiseModel::gaussian(0.01);
  sc.seed = seed + 1;
  const auto vol = tomo::simulate_scan(gen.labels, {0.02, 0.04}, sc);
  return segnet::make_slice_dataset(vol, gen.labels, 5, 0.02);
}

}  // namespace

TEST_CASE("weighted dice loss: perfect prediction is (near) zero") {
  Tape t;
  // dense one-hot masks over 2 classes
  std::vector<double> g = {1, 0, 1, 0, /*class1*/ 0, 1, 0, 1};
  Tensor pred = t.leaf({1, 2, 2, 2}, g, false);
  Tensor truth = t.leaf({1, 2, 2, 2}, g, false);
  const double loss = segnet::weighted_dice_loss(t, pred, truth, {1.0, 1.0}, 1e-6).item();
  CHECK(loss < 1e-6);
}

TEST_CASE("weighted dice loss with uniform weights equals the direct unweighted oracle") {
  Rng rng(1);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> p(2 * 3 * 4 * 4), g(p.size());
    for (auto& v : p) v = rng.uniform();
    for (auto& v : g) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    Tape t;
    Tensor pt = t.leaf({2, 3, 4, 4}, p, false);
    Tensor gt = t.leaf({2, 3, 4, 4}, g, false);
    const double got = segnet::weighted_dice_loss(t, pt, gt, {1, 1, 1}, 1e-6).item();

    // direct formula with w=1, flattened per class over the whole batch
    std::vector<std::vector<double>> pc(3), gc(3);
    const size_t plane = 16;
    for (int n = 0; n < 2; ++n) {
      for (int c = 0; c < 3; ++c) {
        for (size_t i = 0; i < plane; ++i) {
          pc[static_cast<size_t>(c)].push_back(p[(static_cast<size_t>(n) * 3 + c) * plane + i]);
          gc[static_cast<size_t>(c)].push_back(g[(static_cast<size_t>(n) * 3 + c) * plane + i]);
        }
      }
    }
    const double want = oracle::weighted_dice_ref(pc, gc, {1, 1, 1}, 1e-6);
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("weighted dice loss: 2-class 2x2 hand case with weights (1,2)") {
  // per class: p = [[1,0],[0,0]], g = [[1,1],[0,0]]
  const std::vector<double> p = {1, 0, 0, 0, 1, 0, 0, 0};
  const std::vector<double> g = {1, 1, 0, 0, 1, 1, 0, 0};
  Tape t;
  Tensor pt = t.leaf({1, 2, 2, 2}, p, false);
  Tensor gt = t.leaf({1, 2, 2, 2}, g, false);
  const double got = segnet::weighted_dice_loss(t, pt, gt, {1.0, 2.0}, 1e-6).item();
  const double want = oracle::weighted_dice_ref({{1, 0, 0, 0}, {1, 0, 0, 0}},
                                                {{1, 1, 0, 0}, {1, 1, 0, 0}}, {1.0, 2.0}, 1e-6);
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
  // hand arithmetic: num = 2(1*1 + 2*1), den = 1*3 + 2*3 -> loss = 1 - 6/9
  CHECK(got == doctest::Approx(1.0 - 6.0 / 9.0).epsilon(1e-6));
}

TEST_CASE("weighted dice loss stays in [0,1] and passes grad_check") {
  Rng rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> p(1 * 2 * 8 * 8), g(p.size());
    for (auto& v : p) v = rng.uniform();
    for (auto& v : g) v = rng.uniform() < rng.uniform() ? 1.0 : 0.0;
    Tape t;
    Tensor pt = t.leaf({1, 2, 8, 8}, p, false);
    Tensor gt = t.leaf({1, 2, 8, 8}, g, false);
    const double loss = segnet::weighted_dice_loss(t, pt, gt, {1.0, 2.5}, 1e-6).item();
    CHECK(loss >= 0.0);
    CHECK(loss <= 1.0);
  }

  std::vector<double> p(2 * 8 * 8), g(p.size());
  for (auto& v : p) v = rng.uniform(0.05, 0.95);
  for (auto& v : g) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  auto rep = diff::grad_check(
      [&](Tape& t, const std::vector<Tensor>& in) {
        Tensor gt = t.leaf({1, 2, 8, 8}, g, false);
        return segnet::weighted_dice_loss(t, in[0], gt, {1.0, 2.0}, 1e-6);
      },
      {{{1, 2, 8, 8}, p}}, 1e-5, 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("dice score term matches 2 iou/(1+iou) on crisp binary masks") {
  Rng rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> p(64), g(64);
    bool any = false;
    for (size_t i = 0; i < 64; ++i) {
      p[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
      g[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
      any = any || p[i] > 0 || g[i] > 0;
    }
    if (!any) continue;
    Tape t;
    Tensor pt = t.leaf({1, 1, 8, 8}, p, false);
    Tensor gt = t.leaf({1, 1, 8, 8}, g, false);
    const double dice_score = 1.0 - segnet::weighted_dice_loss(t, pt, gt, {1.0}, 1e-9).item();
    metrics::Mask pm(64), gm(64);
    for (size_t i = 0; i < 64; ++i) {
      pm[i] = p[i] > 0.5;
      gm[i] = g[i] > 0.5;
    }
    const double iou = metrics::iou(pm, gm);
    CHECK(dice_score == doctest::Approx(2.0 * iou / (1.0 + iou)).epsilon(1e-6));
  }
}

TEST_CASE("weighted dice loss rejects bad shapes and weights") {
  Tape t;
  Tensor a = t.leaf({1, 2, 2, 2}, std::vector<double>(8, 0.5), false);
  Tensor b = t.leaf({1, 2, 4, 1}, std::vector<double>(8, 0.5), false);
  CHECK_THROWS_AS(segnet::weighted_dice_loss(t, a, b, {1, 1}, 1e-6), ShapeError);
  CHECK_THROWS_AS(segnet::weighted_dice_loss(t, a, a, {1, -1}, 1e-6), ConfigError);
  CHECK_THROWS_AS(segnet::weighted_dice_loss(t, a, a, {1}, 1e-6), ConfigError);
}

TEST_CASE("unet forward: softmax normalization, finiteness, determinism") {
  const auto cfg = tiny_net();
  auto params = segnet::build_unet25(cfg, 5);
  std::vector<double> zeros(static_cast<size_t>(2) * 5 * 32 * 32, 0.0);

  auto run = [&] {
    Tape t;
    auto bound = diff::bind_params(t, params, false);
    Tensor x = t.leaf({2, 5, 32, 32}, zeros, false);
    return segnet::unet25_forward(t, bound, x, cfg).value();
  };
  const auto a = run();
  const auto b = run();
  CHECK(a == b);
  const size_t plane = 32 * 32;
  for (int n = 0; n < 2; ++n) {
    for (size_t i = 0; i < plane; ++i) {
      double s = 0.0;
      for (int c = 0; c < 4; ++c) s += a[(static_cast<size_t>(n) * 4 + c) * plane + i];
      REQUIRE(s == doctest::Approx(1.0).epsilon(1e-6));
      REQUIRE(std::isfinite(s));
    }
  }
}

TEST_CASE("parameter count matches the closed form for (base 8, depth 3)") {
  UNet25Config cfg;  // defaults: in 5, width 8, depth 3, classes 4, patch 64
  // closed form summed layer by layer:
  //   enc0 952, enc1 3488, enc2 13888, bottleneck 55424,
  //   dec2 46176, dec1 11568, dec0 2904, head 36
  const int64_t expect = 952 + 3488 + 13888 + 55424 + 46176 + 11568 + 2904 + 36;
  CHECK(expect == 134436);
  CHECK(segnet::unet25_param_count(cfg) == expect);
  auto store = segnet::build_unet25(cfg, 1);
  CHECK(store.total_count() == expect);
  CHECK(store.trainable_count() == expect);  // the baseline trains everything
}

TEST_CASE("unet config invariants") {
  UNet25Config cfg = tiny_net();
  cfg.in_channels = 4;  // must be odd
  CHECK_THROWS_AS(segnet::build_unet25(cfg, 1), ConfigError);
  cfg = tiny_net();
  cfg.patch_size = 30;  // not divisible by 2^depth
  CHECK_THROWS_AS(segnet::build_unet25(cfg, 1), ConfigError);
}

TEST_CASE("slice_window: interior, boundary replication, degenerate window") {
  Volume v(6, 4, 4);
  for (int z = 0; z < 6; ++z) {
    for (size_t i = 0; i < 16; ++i) v.slice(z)[i] = static_cast<float>(z);
  }
  const auto mid = segnet::slice_window(v, 3, 5);
  REQUIRE(mid.size() == 5);
  for (int k = 0; k < 5; ++k) CHECK(mid[static_cast<size_t>(k)].data[0] == doctest::Approx(1.0 + k));

  const auto lo = segnet::slice_window(v, 0, 5);  // [s0,s0,s0,s1,s2]
  CHECK(lo[0].data[0] == 0.0);
  CHECK(lo[1].data[0] == 0.0);
  CHECK(lo[2].data[0] == 0.0);
  CHECK(lo[3].data[0] == 1.0);
  CHECK(lo[4].data[0] == 2.0);

  const auto hi = segnet::slice_window(v, 5, 5);  // [s3,s4,s5,s5,s5]
  CHECK(hi[0].data[0] == 3.0);
  CHECK(hi[4].data[0] == 5.0);

  const auto single = segnet::slice_window(v, 2, 1);
  REQUIRE(single.size() == 1);
  CHECK(single[0].data[0] == 2.0);

  CHECK_THROWS_AS(segnet::slice_window(v, 2, 4), ConfigError);  // even window
  CHECK_THROWS_AS(segnet::slice_window(v, 2, 7), ConfigError);  // exceeds depth
}

TEST_CASE("training improves validation dice on a synthetic phantom set") {
  const auto ds = tiny_dataset(11);
  const auto cfg = tiny_net();
  TrainConfig tc;
  tc.max_epochs = 10;
  tc.batch_size = 8;
  tc.seed = 3;
  auto res = segnet::train(cfg, segnet::build_unet25(cfg, 3), ds, tc);
  REQUIRE(res.history.size() == 10);
  CHECK(res.history.back().val_dice > res.history.front().val_dice);
  CHECK(res.best_val_dice >= res.history.front().val_dice);

  // schedule contract: lr never increases; any drop is by the decay factor
  // and carries the reset flag
  for (size_t i = 1; i < res.history.size(); ++i) {
    CHECK(res.history[i].lr <= res.history[i - 1].lr);
    if (res.history[i].lr < res.history[i - 1].lr) {
      CHECK(res.history[i].reset);
      CHECK(res.history[i].lr ==
            doctest::Approx(res.history[i - 1].lr * tc.lr_decay_factor));
    }
  }
}

TEST_CASE("stagnant validation triggers the plateau schedule after exactly 15 epochs") {
  const auto ds = tiny_dataset(12, 14);
  const auto cfg = tiny_net();
  TrainConfig tc;
  tc.lr_init = 0.0;  // frozen optimizer: validation loss cannot improve
  tc.max_epochs = 33;
  tc.batch_size = 8;
  tc.seed = 4;
  auto res = segnet::train(cfg, segnet::build_unet25(cfg, 5), ds, tc);
  REQUIRE(res.history.size() == 33);
  for (const auto& e : res.history) {
    const bool expect_reset = e.epoch == 16 || e.epoch == 31;  // 15 stagnant epochs each
    CHECK(e.reset == expect_reset);
  }
}

TEST_CASE("identical seeds reproduce identical training histories") {
  const auto ds = tiny_dataset(13, 12);
  const auto cfg = tiny_net();
  TrainConfig tc;
  tc.max_epochs = 4;
  tc.batch_size = 4;
  tc.seed = 9;
  auto a = segnet::train(cfg, segnet::build_unet25(cfg, 7), ds, tc);
  auto b = segnet::train(cfg, segnet::build_unet25(cfg, 7), ds, tc);
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_loss == b.history[i].val_loss);
    CHECK(a.history[i].val_dice == b.history[i].val_dice);
  }
  const auto csv = segnet::history_csv(a.history);
  CHECK(csv.find("epoch,train_loss,val_loss,val_dice,lr,reset_flag") == 0);
}

TEST_CASE("divergent training aborts with the last finite state") {
  const auto ds = tiny_dataset(14, 12);
  const auto cfg = tiny_net();
  TrainConfig tc;
  tc.lr_init = 1e60;  // guaranteed overflow in the conv stack on the next epoch
  tc.max_epochs = 6;
  tc.batch_size = 8;
  tc.seed = 2;
  auto res = segnet::train(cfg, segnet::build_unet25(cfg, 8), ds, tc);
  CHECK(res.aborted_nonfinite);
  for (const auto& [name, p] : res.params) {
    for (double v : p.data) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("train rejects an empty dataset") {
  segnet::SliceDataset empty;
  empty.channels = 5;
  CHECK_THROWS_AS(segnet::train(tiny_net(), segnet::build_unet25(tiny_net(), 1), empty,
                                TrainConfig{}),
                  ConfigError);
}

TEST_CASE("patch dataset: shapes, determinism, defect anchoring") {
  const auto full = tiny_dataset(21, 10);
  // rebuild the source volume/labels for the patch sampler
  phantom::PhantomSpec ps;
  ps.grid_shape = {10, 32, 32};
  ps.part_shape = phantom::PartShape::cylinder(0.8, 1.0);
  ps.mu_material = 0.02;
  ps.mu_inclusion = 0.04;
  ps.pore_density_target = 0.03;
  ps.seed = 77;
  auto gen = phantom::generate_phantom(ps);
  tomo::ScanConfig sc;
  sc.n_views = 90;
  sc.detector_bins = 48;
  sc.seed = 78;
  const auto vol = tomo::simulate_scan(gen.labels, {0.02, 0.04}, sc);

  const auto a = segnet::make_patch_dataset(vol, gen.labels, 5, 16, 40, 0.02, 5, 1.0);
  REQUIRE(a.samples.size() == 40);
  CHECK(a.height == 16);
  CHECK(a.channels == 5);
  for (const auto& s : a.samples) {
    CHECK(s.x.size() == 5u * 16 * 16);
    CHECK(s.y.size() == 16u * 16);
  }
  const auto b = segnet::make_patch_dataset(vol, gen.labels, 5, 16, 40, 0.02, 5, 1.0);
  for (size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].x == b.samples[i].x);
    CHECK(a.samples[i].y == b.samples[i].y);
  }

  // every defect-anchored patch contains at least one defect voxel
  int64_t with_defect = 0;
  for (const auto& s : a.samples) {
    bool any = false;
    for (uint8_t c : s.y) any = any || c == static_cast<uint8_t>(VoxClass::pore);
    with_defect += any;
  }
  CHECK(with_defect == 40);

  // anchored sampling concentrates far more pore voxels than uniform sampling
  const auto u = segnet::make_patch_dataset(vol, gen.labels, 5, 16, 40, 0.02, 5, 0.0);
  auto pore_count = [](const segnet::SliceDataset& ds) {
    int64_t n = 0;
    for (const auto& s : ds.samples) {
      for (uint8_t c : s.y) n += c == static_cast<uint8_t>(VoxClass::pore);
    }
    return n;
  };
  CHECK(pore_count(a) > 2 * pore_count(u));

  CHECK_THROWS_AS(segnet::make_patch_dataset(vol, gen.labels, 5, 64, 4, 0.02, 5, 2.0),
                  ConfigError);
  CHECK_THROWS_AS(segnet::make_patch_dataset(vol, gen.labels, 5, 2, 4, 0.02, 5, 0.5),
                  ConfigError);
}

TEST_CASE("predict_volume emits one class per voxel") {
  const auto cfg = tiny_net();
  auto params = segnet::build_unet25(cfg, 21);
  Volume v(7, 32, 32);
  Rng rng(5);
  for (auto& x : v.data) x = static_cast<float>(0.02 * rng.uniform());
  const auto pred = segnet::predict_volume(cfg, params, v, 0.02);
  CHECK(pred.shape == v.shape);
  for (uint8_t c : pred.classes) CHECK(c < 4);
}

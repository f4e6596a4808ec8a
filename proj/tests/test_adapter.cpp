#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "xct/adapter.hpp"
#include "xct/common.hpp"
#include "xct/gradcheck.hpp"

using namespace xct;
using adapter::AdapterConfig;
using adapter::AdapterModel;
using adapter::BackboneConfig;
using diff::Tape;
using diff::Tensor;

namespace {

BackboneConfig tiny_backbone(uint64_t seed = 1, int pretrain = 0) {
  BackboneConfig c;
  c.stem_width = 8;
  c.block_widths = {12, 12, 16, 16};
  c.pretrain_steps = pretrain;
  c.seed = seed;
  return c;
}

AdapterConfig tiny_adapter(int experts = 8) {
  AdapterConfig c;
  c.n_experts = experts;
  c.rank = 2;
  c.insertion_points = {1, 3};
  c.seed = 3;
  return c;
}

std::vector<double> random_values(size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

adapter::BinaryDataset blob_dataset(int n_samples, int size, uint64_t seed) {
  adapter::BinaryDataset ds;
  ds.height = size;
  ds.width = size;
  Rng rng(seed);
  for (int s = 0; s < n_samples; ++s) {
    adapter::BinarySample sample;
    sample.image.assign(static_cast<size_t>(size) * size, 0.0);
    sample.mask.assign(static_cast<size_t>(size) * size, 0);
    const int blobs = 1 + static_cast<int>(rng.uniform_index(3));
    for (int b = 0; b < blobs; ++b) {
      const double cy = rng.uniform(6.0, size - 6.0);
      const double cx = rng.uniform(6.0, size - 6.0);
      const double r = rng.uniform(3.0, 6.0);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) {
            sample.image[static_cast<size_t>(y) * size + x] = 1.0;
            sample.mask[static_cast<size_t>(y) * size + x] = 1;
          }
        }
      }
    }
    for (auto& v : sample.image) v += 0.05 * rng.normal();
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

}  // namespace

TEST_CASE("pretrained backbone is frozen and deterministic") {
  const auto a = adapter::make_pretrained_backbone(tiny_backbone(5, 4));
  const auto b = adapter::make_pretrained_backbone(tiny_backbone(5, 4));
  CHECK(a.fingerprint == b.fingerprint);
  CHECK(a.params.trainable_count() == 0);
  CHECK(a.params.total_count() > 0);
  const auto c = adapter::make_pretrained_backbone(tiny_backbone(6, 4));
  CHECK(c.fingerprint != a.fingerprint);
}

TEST_CASE("zero-initialized W_D makes the adapter invisible") {
  const auto bb = adapter::make_pretrained_backbone(tiny_backbone());
  const auto m1 = adapter::build_adapter_model(bb, tiny_adapter());
  // same model with every pre-W_D branch parameter rewritten: W_E, experts,
  // gate, mixing conv; W_D stays zero
  auto m2 = m1;
  Rng prng(99);
  for (auto& [name, p] : m2.params) {
    if (name.rfind("adapter.", 0) == 0 && name.find(".wd.") == std::string::npos) {
      for (auto& v : p.data) v = prng.uniform(-1.0, 1.0);
    }
  }

  Rng rng(7);
  const auto xv = random_values(static_cast<size_t>(1) * 1 * 32 * 32, rng, 0.0, 1.0);
  auto forward = [&](const AdapterModel& m) {
    Tape t;
    auto bound = diff::bind_params(t, m.params, false);
    Tensor x = t.leaf({1, 1, 32, 32}, xv, false);
    return adapter::model_forward(t, bound, x, m.backbone_cfg, m.adapter_cfg).value();
  };
  auto h1 = forward(m1);
  auto h2 = forward(m2);
  CHECK(h1 == h2);

  // and the adapted block output equals the frozen conv exactly
  const int cin = bb.cfg.block_widths[0];
  const auto bx = random_values(static_cast<size_t>(1) * cin * 8 * 8, rng);
  Tape t;
  auto bound = diff::bind_params(t, m1.params, false);
  Tensor x = t.leaf({1, cin, 8, 8}, bx, false);
  Tensor h = adapter::adapter_forward(t, bound, "backbone.block1", "adapter.block1", x,
                                      m1.adapter_cfg);
  Tensor w0 = t.conv2d(x, bound.at("backbone.block1.w"), bound.at("backbone.block1.b"), 1, 1);
  CHECK(h.value() == w0.value());
}

TEST_CASE("single-expert adapter matches a direct reference implementation") {
  const auto bb = adapter::make_pretrained_backbone(tiny_backbone());
  auto cfg = tiny_adapter(1);
  auto model = adapter::build_adapter_model(bb, cfg);

  // make the branch visible and the gate non-trivial
  Rng rng(17);
  auto& wd = model.params.at("adapter.block1.wd.w").data;
  for (auto& v : wd) v = rng.uniform(-0.5, 0.5);
  auto& gate = model.params.at("adapter.block1.gate.w").data;
  for (auto& v : gate) v = rng.uniform(-1.0, 1.0);

  const int cin = bb.cfg.block_widths[0];   // block1 input width
  const int cout = bb.cfg.block_widths[1];
  const int r = cfg.rank;
  const auto xv = random_values(static_cast<size_t>(1) * cin * 9 * 9, rng);

  Tape t;
  auto bound = diff::bind_params(t, model.params, false);
  Tensor x = t.leaf({1, cin, 9, 9}, xv, false);
  const auto got =
      adapter::adapter_forward(t, bound, "backbone.block1", "adapter.block1", x, cfg).value();

  // reference: H = W0 x + W_D(Conv_mix(N_1(W_E x))); softmax over one expert is 1
  const auto& P = model.params;
  const auto w0out = oracle::conv2d_ref(xv, 1, cin, 9, 9, P.at("backbone.block1.w").data, cout,
                                        3, 3, &P.at("backbone.block1.b").data, 1, 1);
  const auto z = oracle::conv2d_ref(xv, 1, cin, 9, 9, P.at("adapter.block1.we.w").data, r, 1, 1,
                                    nullptr, 1, 0);
  const auto e1 = oracle::depthwise_conv2d_ref(z, 1, r, 9, 9, P.at("adapter.block1.expert0.w").data,
                                               3, 3, &P.at("adapter.block1.expert0.b").data, 1, 1);
  const auto mixed = oracle::conv2d_ref(e1, 1, r, 9, 9, P.at("adapter.block1.mix.w").data, r, 3, 3,
                                        &P.at("adapter.block1.mix.b").data, 1, 1);
  const auto branch = oracle::conv2d_ref(mixed, 1, r, 9, 9, P.at("adapter.block1.wd.w").data, cout,
                                         1, 1, nullptr, 1, 0);
  REQUIRE(got.size() == w0out.size());
  for (size_t i = 0; i < got.size(); ++i) {
    REQUIRE(got[i] == doctest::Approx(w0out[i] + branch[i]).epsilon(1e-10));
  }
}

TEST_CASE("the default configuration instantiates 8 experts and one gate") {
  AdapterConfig def;
  CHECK(def.n_experts == 8);
  const auto bb = adapter::make_pretrained_backbone(tiny_backbone());
  const auto model = adapter::build_adapter_model(bb, tiny_adapter(8));
  int experts = 0, gates = 0;
  for (const auto& name : model.params.names()) {
    if (name.rfind("adapter.block1.expert", 0) == 0 && name.find(".w") != std::string::npos) {
      ++experts;
    }
    if (name == "adapter.block1.gate.w") ++gates;
  }
  CHECK(experts == 8);
  CHECK(gates == 1);
}

TEST_CASE("expert mixture weights are nonnegative and sum to one per location") {
  const auto bb = adapter::make_pretrained_backbone(tiny_backbone());
  auto model = adapter::build_adapter_model(bb, tiny_adapter(4));
  Rng rng(23);
  const int cin = bb.cfg.block_widths[0];
  const auto xv = random_values(static_cast<size_t>(1) * cin * 8 * 8, rng);

  // recompute the gate path directly from the stored parameters
  const auto& P = model.params;
  const int r = model.adapter_cfg.rank, E = 4;
  const auto z = oracle::conv2d_ref(xv, 1, cin, 8, 8, P.at("adapter.block1.we.w").data, r, 1, 1,
                                    nullptr, 1, 0);
  const auto logits = oracle::conv2d_ref(z, 1, r, 8, 8, P.at("adapter.block1.gate.w").data, E, 3,
                                         3, &P.at("adapter.block1.gate.b").data, 1, 1);
  const size_t plane = 64;
  for (size_t i = 0; i < plane; ++i) {
    double mx = -1e300;
    for (int e = 0; e < E; ++e) mx = std::max(mx, logits[static_cast<size_t>(e) * plane + i]);
    double sum = 0.0;
    for (int e = 0; e < E; ++e) sum += std::exp(logits[static_cast<size_t>(e) * plane + i] - mx);
    for (int e = 0; e < E; ++e) {
      const double g = std::exp(logits[static_cast<size_t>(e) * plane + i] - mx) / sum;
      REQUIRE(g >= 0.0);
    }
    CHECK(sum > 0.0);
  }
}

TEST_CASE("trainable fraction: all-frozen store, closed-form toy ratio, desk default") {
  diff::ParamStore frozen;
  frozen.add("a", {4}, {1, 2, 3, 4}, false);
  CHECK(diff::count_trainable_fraction(frozen) == 0.0);

  const auto cfg = tiny_backbone();
  const auto bb = adapter::make_pretrained_backbone(cfg);
  const auto acfg = tiny_adapter();
  const auto model = adapter::build_adapter_model(bb, acfg);

  // closed-form backbone count: stem + 4 blocks of 3x3 convs with bias
  auto conv_n = [](int cin, int cout, int k) { return cout * cin * k * k + cout; };
  int64_t backbone_n = conv_n(1, cfg.stem_width, 3);
  int prev = cfg.stem_width;
  for (int wdt : cfg.block_widths) {
    backbone_n += conv_n(prev, wdt, 3);
    prev = wdt;
  }
  // closed-form adapter count at each insertion (rank r, E experts, gate k=3)
  const int r = acfg.rank, E = acfg.n_experts;
  auto adapter_n = [&](int cin, int cout) {
    return r * cin                      // W_E (no bias)
           + (E * r * 9 + E)            // gate conv
           + E * (r * 9 + r)            // depthwise experts
           + (r * r * 9 + r)            // mixing conv
           + cout * r;                  // W_D (no bias)
  };
  int64_t trainable_n = adapter_n(cfg.block_widths[0], cfg.block_widths[1]) +
                        adapter_n(cfg.block_widths[2], cfg.block_widths[3]);
  // mask decoder head (reduce widths 12 and 8)
  const int cskip = cfg.block_widths[1], cdeep = cfg.block_widths.back();
  trainable_n += conv_n(cdeep, 12, 1) + conv_n(cskip, 12, 1) + conv_n(24, 12, 3) +
                 conv_n(12, 8, 3) + conv_n(8, 1, 1);

  CHECK(model.params.trainable_count() == trainable_n);
  CHECK(model.params.total_count() == backbone_n + trainable_n);
  CHECK(adapter::count_trainable_fraction(model.params) ==
        doctest::Approx(static_cast<double>(trainable_n) /
                        static_cast<double>(backbone_n + trainable_n))
            .epsilon(1e-15));

  // desk-scale default stays in the parameter-efficient regime
  BackboneConfig desk;
  desk.pretrain_steps = 0;
  const auto desk_bb = adapter::make_pretrained_backbone(desk);
  const auto desk_model = adapter::build_adapter_model(desk_bb, AdapterConfig{});
  CHECK(adapter::count_trainable_fraction(desk_model.params) < 0.05);
}

TEST_CASE("structure loss: near-perfect prediction sits at the minimum") {
  const double eps = 1e-7;
  Rng rng(29);
  std::vector<double> g(16 * 16);
  for (auto& v : g) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  std::vector<double> p(g.size());
  for (size_t i = 0; i < g.size(); ++i) p[i] = g[i] == 1.0 ? 1.0 - eps : eps;
  Tape t;
  Tensor pt = t.leaf({1, 1, 16, 16}, p, false);
  Tensor gt = t.leaf({1, 1, 16, 16}, g, false);
  const double loss = adapter::structure_loss(t, pt, gt, 5.0, 15, eps).item();
  CHECK(loss >= 0.0);
  CHECK(loss < 2.0 * eps * std::log(1.0 / eps));
}

TEST_CASE("structure loss with lambda 0 reduces to plain BCE plus IoU loss") {
  Rng rng(31);
  std::vector<double> p(12 * 12), g(p.size());
  for (auto& v : p) v = rng.uniform(0.05, 0.95);
  for (auto& v : g) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
  Tape t;
  Tensor pt = t.leaf({1, 1, 12, 12}, p, false);
  Tensor gt = t.leaf({1, 1, 12, 12}, g, false);
  const double got = adapter::structure_loss(t, pt, gt, 0.0, 15, 1e-7).item();

  double bce = 0.0, inter = 0.0, uni = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    bce += -(g[i] * std::log(p[i]) + (1.0 - g[i]) * std::log(1.0 - p[i]));
    inter += p[i] * g[i];
    uni += p[i] + g[i] - p[i] * g[i];
  }
  bce /= static_cast<double>(p.size());
  const double iou_loss = 1.0 - (inter + 1.0) / (uni + 1.0);
  CHECK(got == doctest::Approx(bce + iou_loss).epsilon(1e-12));
}

TEST_CASE("structure loss passes grad_check on a random 16x16 case") {
  Rng rng(37);
  std::vector<double> p(16 * 16), g(p.size());
  for (auto& v : p) v = rng.uniform(0.1, 0.9);
  for (auto& v : g) v = rng.uniform() < 0.35 ? 1.0 : 0.0;
  auto rep = diff::grad_check(
      [&](Tape& t, const std::vector<Tensor>& in) {
        Tensor gt = t.leaf({1, 1, 16, 16}, g, false);
        return adapter::structure_loss(t, in[0], gt, 5.0, 15, 1e-7);
      },
      {{{1, 1, 16, 16}, p}}, 1e-5, 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("structure loss rejects mismatched shapes") {
  Tape t;
  Tensor a = t.leaf({1, 1, 4, 4}, std::vector<double>(16, 0.5), false);
  Tensor b = t.leaf({1, 1, 2, 8}, std::vector<double>(16, 0.5), false);
  CHECK_THROWS_AS(adapter::structure_loss(t, a, b), ShapeError);
}

TEST_CASE("every trainable parameter receives gradient at a generic point") {
  const auto bb = adapter::make_pretrained_backbone(tiny_backbone());
  auto model = adapter::build_adapter_model(bb, tiny_adapter(3));
  // generic point: perturb all trainables away from the zero-init W_D
  Rng rng(41);
  for (auto& [name, p] : model.params) {
    if (p.trainable) {
      for (auto& v : p.data) v += rng.uniform(0.01, 0.1) * (rng.uniform() < 0.5 ? -1 : 1);
    }
  }
  std::vector<double> x = random_values(32 * 32, rng, 0.0, 1.0);
  std::vector<double> g(32 * 32);
  for (auto& v : g) v = rng.uniform() < 0.4 ? 1.0 : 0.0;

  Tape t;
  auto bound = diff::bind_params(t, model.params, true);
  Tensor xt = t.leaf({1, 1, 32, 32}, x, false);
  Tensor gt = t.leaf({1, 1, 32, 32}, g, false);
  Tensor probs = adapter::model_forward(t, bound, xt, model.backbone_cfg, model.adapter_cfg);
  t.backward(adapter::structure_loss(t, probs, gt));

  for (const auto& [name, tt] : bound) {
    if (!model.params.at(name).trainable) {
      CHECK_FALSE(tt.has_grad());
      continue;
    }
    REQUIRE(tt.has_grad());
    double norm = 0.0;
    for (double v : tt.grad()) norm += v * v;
    INFO("parameter " << name);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("finetune on a separable toy set: frozen backbone, val IoU above 0.8") {
  adapter::FinetuneConfig def;
  CHECK(def.epochs == 20);
  CHECK(def.lr == doctest::Approx(3e-4));
  CHECK(def.batch_size == 4);

  const auto bb = adapter::make_pretrained_backbone(tiny_backbone(2, 6));
  auto model = adapter::build_adapter_model(bb, tiny_adapter(4));
  const auto ds = blob_dataset(20, 32, 51);

  adapter::FinetuneConfig cfg;
  cfg.epochs = 20;
  cfg.lr = 1e-3;  // toy-set budget; the desk pipeline uses the 3e-4 default
  cfg.batch_size = 4;
  cfg.seed = 5;
  const uint64_t frozen_before = model.params.fingerprint(true);
  auto res = adapter::finetune(model, ds, cfg);
  CHECK(res.model.params.fingerprint(true) == frozen_before);  // backbone untouched
  CHECK(res.best_val_iou > 0.8);
  CHECK(res.model.backbone_fingerprint == bb.fingerprint);

  // changed parameters are a subset of the trainable set
  for (const auto& [name, p] : res.model.params) {
    if (!p.trainable) CHECK(p.data == model.params.at(name).data);
  }
}

TEST_CASE("finetune rejects a dataset with no positive pixels") {
  const auto bb = adapter::make_pretrained_backbone(tiny_backbone());
  auto model = adapter::build_adapter_model(bb, tiny_adapter(2));
  auto ds = blob_dataset(6, 32, 53);
  for (auto& s : ds.samples) std::fill(s.mask.begin(), s.mask.end(), 0);
  try {
    adapter::finetune(model, ds, adapter::FinetuneConfig{});
    FAIL("expected degenerate class error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("degenerate class") != std::string::npos);
  }
}

TEST_CASE("adapter checkpoints refuse a mismatched backbone") {
  const auto bb1 = adapter::make_pretrained_backbone(tiny_backbone(1));
  const auto bb2 = adapter::make_pretrained_backbone(tiny_backbone(2));
  auto m1 = adapter::build_adapter_model(bb1, tiny_adapter(2));
  auto m2 = adapter::build_adapter_model(bb2, tiny_adapter(2));

  adapter::save_adapter_checkpoint(m1, "/tmp/xct_test_adapter.ckpt", "pore", 3);
  CHECK_THROWS_AS(adapter::load_adapter_checkpoint(m2, "/tmp/xct_test_adapter.ckpt"),
                  ConfigError);

  // and loads cleanly onto a matching one
  auto m1b = adapter::build_adapter_model(bb1, tiny_adapter(2));
  Rng rng(61);
  for (auto& [name, p] : m1.params) {
    if (p.trainable) {
      for (auto& v : p.data) v = rng.uniform();
    }
  }
  adapter::save_adapter_checkpoint(m1, "/tmp/xct_test_adapter.ckpt", "pore", 4);
  std::string model_id;
  adapter::load_adapter_checkpoint(m1b, "/tmp/xct_test_adapter.ckpt", &model_id);
  CHECK(model_id == "pore");
  for (const auto& [name, p] : m1.params) {
    CHECK(m1b.params.at(name).data == p.data);
  }
}

TEST_CASE("adapter config validation") {
  const auto bb = adapter::make_pretrained_backbone(tiny_backbone());
  auto cfg = tiny_adapter();
  cfg.n_experts = 0;
  CHECK_THROWS_AS(adapter::build_adapter_model(bb, cfg), ConfigError);
  cfg = tiny_adapter();
  cfg.rank = 0;
  CHECK_THROWS_AS(adapter::build_adapter_model(bb, cfg), ConfigError);
  cfg = tiny_adapter();
  cfg.insertion_points = {9};
  CHECK_THROWS_AS(adapter::build_adapter_model(bb, cfg), ConfigError);
  cfg = tiny_adapter();
  cfg.rank = 64;  // not well below the block width
  CHECK_THROWS_AS(adapter::build_adapter_model(bb, cfg), ConfigError);
}

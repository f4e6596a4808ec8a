#include "xct/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "xct/common.hpp"

namespace xct::adapter {

using diff::ParamStore;
using diff::Shape;
using diff::Tape;
using diff::Tensor;

void AdapterConfig::validate(int n_blocks) const {
  if (n_experts < 1) throw ConfigError("adapter: n_experts must be >= 1");
  if (rank < 1) throw ConfigError("adapter: rank must be >= 1");
  if (conv_kernel < 1 || conv_kernel % 2 == 0) {
    throw ConfigError("adapter: gate conv kernel must be odd");
  }
  if (insertion_points.empty()) throw ConfigError("adapter: no insertion points");
  for (int i : insertion_points) {
    if (i < 0 || i >= n_blocks) {
      throw ConfigError("adapter: insertion point " + std::to_string(i) + " outside " +
                        std::to_string(n_blocks) + " blocks");
    }
  }
}

namespace {

constexpr int kHeadReduce = 12;
constexpr int kHeadRefine = 8;
constexpr int kSkipBlock = 1;  // head taps: /2-scale block and the last block

void add_conv(ParamStore& store, Rng& rng, const std::string& name, int cin, int cout, int k,
              bool trainable, double init_std = -1.0) {
  const double std = init_std >= 0.0 ? init_std : std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
  std::vector<double> w(static_cast<size_t>(cout) * cin * k * k);
  for (double& v : w) v = std > 0.0 ? rng.normal(0.0, std) : 0.0;
  store.add(name + ".w", {cout, cin, k, k}, std::move(w), trainable);
  store.add(name + ".b", {cout}, std::vector<double>(cout, 0.0), trainable);
}

int block_input_width(const BackboneConfig& cfg, int block) {
  return block == 0 ? cfg.stem_width : cfg.block_widths[static_cast<size_t>(block) - 1];
}

ParamStore backbone_params(const BackboneConfig& cfg, bool trainable) {
  if (cfg.block_widths.size() < 2) throw ConfigError("backbone: need at least 2 blocks");
  ParamStore store;
  Rng rng(cfg.seed);
  add_conv(store, rng, "backbone.stem", 1, cfg.stem_width, 3, trainable);
  for (size_t i = 0; i < cfg.block_widths.size(); ++i) {
    add_conv(store, rng, "backbone.block" + std::to_string(i),
             block_input_width(cfg, static_cast<int>(i)), cfg.block_widths[i], 3, trainable);
  }
  return store;
}

bool has_adapter(const AdapterConfig& cfg, int block) {
  return std::find(cfg.insertion_points.begin(), cfg.insertion_points.end(), block) !=
         cfg.insertion_points.end();
}

// Per-block embeddings with adapters applied at the configured insertions.
std::vector<Tensor> backbone_embeddings(Tape& t, const std::map<std::string, Tensor>& p,
                                        Tensor x, const BackboneConfig& bb,
                                        const AdapterConfig* ad) {
  Tensor h = t.relu(t.conv2d(x, p.at("backbone.stem.w"), p.at("backbone.stem.b"), 1, 1));
  h = t.avg_pool2d(h, 2, 2);
  std::vector<Tensor> embeddings;
  const int n_blocks = static_cast<int>(bb.block_widths.size());
  for (int i = 0; i < n_blocks; ++i) {
    if (i == n_blocks / 2) h = t.avg_pool2d(h, 2, 2);
    const std::string frozen = "backbone.block" + std::to_string(i);
    Tensor pre;
    if (ad && has_adapter(*ad, i)) {
      pre = adapter_forward(t, p, frozen, "adapter.block" + std::to_string(i), h, *ad);
    } else {
      pre = t.conv2d(h, p.at(frozen + ".w"), p.at(frozen + ".b"), 1, 1);
    }
    h = t.relu(pre);
    embeddings.push_back(h);
  }
  return embeddings;
}

}  // namespace

FrozenBackbone make_pretrained_backbone(const BackboneConfig& cfg) {
  ParamStore store = backbone_params(cfg, true);
  if (cfg.pretrain_steps > 0) {
    // denoising pretext task on synthetic blob images
    Rng rng(mix_seed(cfg.seed, 0x9e3779b9ULL));
    const int n = 32, batch = 4;
    const int deep = cfg.block_widths.back();
    {
      Rng wrng(mix_seed(cfg.seed, 7));
      add_conv(store, wrng, "pre.reduce", deep, kHeadRefine, 1, true);
      add_conv(store, wrng, "pre.out", kHeadRefine, 1, 3, true);
    }
    diff::Adam adam(store, 1e-3);
    for (int step = 0; step < cfg.pretrain_steps; ++step) {
      std::vector<double> clean(static_cast<size_t>(batch) * n * n, 0.0);
      std::vector<double> noisy(clean.size());
      for (int b = 0; b < batch; ++b) {
        const int blobs = 3 + static_cast<int>(rng.uniform_index(4));
        for (int k = 0; k < blobs; ++k) {
          const double cy = rng.uniform(4.0, n - 4.0), cx = rng.uniform(4.0, n - 4.0);
          const double r = rng.uniform(2.0, 6.0), v = rng.uniform(0.4, 1.0);
          for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
              if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) {
                auto& c = clean[(static_cast<size_t>(b) * n + y) * n + x];
                c = std::max(c, v);
              }
            }
          }
        }
      }
      for (size_t i = 0; i < clean.size(); ++i) noisy[i] = clean[i] + rng.normal(0.0, 0.1);

      Tape tape;
      auto bound = diff::bind_params(tape, store, true);
      Tensor xt = tape.leaf({batch, 1, n, n}, std::move(noisy), false);
      Tensor target = tape.leaf({batch, 1, n, n}, std::move(clean), false);
      auto embs = backbone_embeddings(tape, bound, xt, cfg, nullptr);
      Tensor h = tape.relu(tape.conv2d(embs.back(), bound.at("pre.reduce.w"),
                                       bound.at("pre.reduce.b"), 1, 0));
      h = tape.upsample_nearest(h, 4);
      Tensor rec = tape.conv2d(h, bound.at("pre.out.w"), bound.at("pre.out.b"), 1, 1);
      Tensor diff_t = tape.sub(rec, target);
      Tensor loss = tape.reduce_mean(tape.mul(diff_t, diff_t));
      tape.backward(loss);
      std::map<std::string, std::vector<double>> grads;
      for (const auto& [name, tt] : bound) {
        if (tt.requires_grad()) grads[name] = tt.grad();
      }
      adam.step(grads);
    }
  }

  FrozenBackbone out;
  out.cfg = cfg;
  for (const auto& [name, p] : store) {
    if (name.rfind("backbone.", 0) == 0) out.params.add(name, p.shape, p.data, false);
  }
  out.fingerprint = out.params.fingerprint(true);
  return out;
}

AdapterModel build_adapter_model(const FrozenBackbone& backbone, const AdapterConfig& cfg) {
  const int n_blocks = static_cast<int>(backbone.cfg.block_widths.size());
  cfg.validate(n_blocks);
  for (int i : cfg.insertion_points) {
    if (cfg.rank >= backbone.cfg.block_widths[static_cast<size_t>(i)]) {
      throw ConfigError("adapter: rank must be well below the block width");
    }
  }

  AdapterModel m;
  m.backbone_cfg = backbone.cfg;
  m.adapter_cfg = cfg;
  m.backbone_fingerprint = backbone.fingerprint;
  for (const auto& [name, p] : backbone.params) m.params.add(name, p.shape, p.data, false);

  Rng rng(cfg.seed);
  for (int i : cfg.insertion_points) {
    const std::string ap = "adapter.block" + std::to_string(i);
    const int cin = block_input_width(backbone.cfg, i);
    const int cout = backbone.cfg.block_widths[static_cast<size_t>(i)];
    // W_E: down-projection to rank r (no bias)
    std::vector<double> we(static_cast<size_t>(cfg.rank) * cin);
    for (double& v : we) v = rng.normal(0.0, cfg.init_scale);
    m.params.add(ap + ".we.w", {cfg.rank, cin, 1, 1}, std::move(we), true);
    // gating conv over the down-projected features
    add_conv(m.params, rng, ap + ".gate", cfg.rank, cfg.n_experts, cfg.conv_kernel, true);
    // depthwise expert modules
    for (int e = 0; e < cfg.n_experts; ++e) {
      std::vector<double> ew(static_cast<size_t>(cfg.rank) * 9);
      for (double& v : ew) v = rng.normal(0.0, cfg.init_scale);
      m.params.add(ap + ".expert" + std::to_string(e) + ".w", {cfg.rank, 3, 3}, std::move(ew),
                   true);
      m.params.add(ap + ".expert" + std::to_string(e) + ".b", {cfg.rank},
                   std::vector<double>(static_cast<size_t>(cfg.rank), 0.0), true);
    }
    add_conv(m.params, rng, ap + ".mix", cfg.rank, cfg.rank, 3, true);
    // W_D: up-projection, zero so the adapter is invisible at init
    m.params.add(ap + ".wd.w", {cout, cfg.rank, 1, 1},
                 std::vector<double>(static_cast<size_t>(cout) * cfg.rank, 0.0), true);
  }

  // mask decoder head (fully trainable, lightweight)
  const int c_skip = backbone.cfg.block_widths[kSkipBlock];
  const int c_deep = backbone.cfg.block_widths.back();
  add_conv(m.params, rng, "head.reduce_deep", c_deep, kHeadReduce, 1, true);
  add_conv(m.params, rng, "head.reduce_skip", c_skip, kHeadReduce, 1, true);
  add_conv(m.params, rng, "head.fuse", 2 * kHeadReduce, kHeadReduce, 3, true);
  add_conv(m.params, rng, "head.refine", kHeadReduce, kHeadRefine, 3, true);
  add_conv(m.params, rng, "head.out", kHeadRefine, 1, 1, true);
  return m;
}

Tensor adapter_forward(Tape& t, const std::map<std::string, Tensor>& p,
                       const std::string& frozen_conv, const std::string& ap, Tensor x,
                       const AdapterConfig& cfg) {
  Tensor w0_out = t.conv2d(x, p.at(frozen_conv + ".w"), p.at(frozen_conv + ".b"), 1, 1);
  Tensor z = t.conv2d(x, p.at(ap + ".we.w"), 1, 0);
  Tensor gate = t.softmax(
      t.conv2d(z, p.at(ap + ".gate.w"), p.at(ap + ".gate.b"), 1, (cfg.conv_kernel - 1) / 2), 1);
  std::vector<Tensor> experts;
  experts.reserve(static_cast<size_t>(cfg.n_experts));
  for (int e = 0; e < cfg.n_experts; ++e) {
    const std::string en = ap + ".expert" + std::to_string(e);
    experts.push_back(t.depthwise_conv2d(z, p.at(en + ".w"), p.at(en + ".b"), 1, 1));
  }
  Tensor routed;
  if (cfg.n_experts == 1) {
    routed = experts[0];  // softmax over one expert is identically 1
  } else {
    Tensor eall = t.concat(experts, 1);
    Tensor prod = t.mul(eall, t.repeat_channels(gate, cfg.rank));
    routed = t.slice_channels(prod, 0, cfg.rank);
    for (int e = 1; e < cfg.n_experts; ++e) {
      routed = t.add(routed, t.slice_channels(prod, e * cfg.rank, (e + 1) * cfg.rank));
    }
  }
  Tensor mixed = t.conv2d(routed, p.at(ap + ".mix.w"), p.at(ap + ".mix.b"), 1, 1);
  Tensor branch = t.conv2d(mixed, p.at(ap + ".wd.w"), 1, 0);
  return t.add(w0_out, branch);
}

Tensor model_forward(Tape& t, const std::map<std::string, Tensor>& p, Tensor x,
                     const BackboneConfig& bb, const AdapterConfig& ad) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 1) {
    throw ShapeError("model_forward: expected [N,1,H,W], got " + diff::shape_str(s));
  }
  if (s[2] % 4 != 0 || s[3] % 4 != 0) {
    throw ConfigError("model_forward: H and W must be divisible by 4");
  }
  auto embs = backbone_embeddings(t, p, x, bb, &ad);
  Tensor deep = t.relu(
      t.conv2d(embs.back(), p.at("head.reduce_deep.w"), p.at("head.reduce_deep.b"), 1, 0));
  deep = t.upsample_nearest(deep, 2);
  Tensor skip = t.relu(t.conv2d(embs[kSkipBlock], p.at("head.reduce_skip.w"),
                                p.at("head.reduce_skip.b"), 1, 0));
  Tensor h = t.concat({skip, deep}, 1);
  h = t.relu(t.conv2d(h, p.at("head.fuse.w"), p.at("head.fuse.b"), 1, 1));
  h = t.upsample_nearest(h, 2);
  h = t.relu(t.conv2d(h, p.at("head.refine.w"), p.at("head.refine.b"), 1, 1));
  return t.sigmoid(t.conv2d(h, p.at("head.out.w"), p.at("head.out.b"), 1, 0));
}

Tensor structure_loss(Tape& t, Tensor pred, Tensor truth, double lambda, int pool_k, double eps) {
  // copies: node storage may reallocate as ops are recorded below
  const diff::Shape s = pred.shape();
  if (s != truth.shape()) {
    throw ShapeError("structure_loss: shape mismatch " + diff::shape_str(s) + " vs " +
                     diff::shape_str(truth.shape()));
  }
  if (s.size() != 4 || s[1] != 1) {
    throw ShapeError("structure_loss: need [N,1,H,W], got " + diff::shape_str(s));
  }
  if (pool_k < 1 || pool_k % 2 == 0) throw ConfigError("structure_loss: pool_k must be odd");
  const int N = s[0], H = s[2], W = s[3];

  // boundary-emphasis weights from the (constant) truth: same-size box filter,
  // zero padding, divisor k^2
  const std::vector<double> g = truth.value();
  std::vector<double> wmap(g.size());
  const int half = pool_k / 2;
  const double inv = 1.0 / (static_cast<double>(pool_k) * pool_k);
  double wsum = 0.0;
  for (int n = 0; n < N; ++n) {
    const double* gn = &g[static_cast<size_t>(n) * H * W];
    double* wn = &wmap[static_cast<size_t>(n) * H * W];
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int ky = -half; ky <= half; ++ky) {
          const int yy = y + ky;
          if (yy < 0 || yy >= H) continue;
          for (int kx = -half; kx <= half; ++kx) {
            const int xx = x + kx;
            if (xx < 0 || xx >= W) continue;
            acc += gn[static_cast<size_t>(yy) * W + xx];
          }
        }
        const double v = 1.0 + lambda * std::abs(acc * inv - gn[static_cast<size_t>(y) * W + x]);
        wn[static_cast<size_t>(y) * W + x] = v;
        wsum += v;
      }
    }
  }
  Tensor w = t.leaf(s, std::move(wmap), false);

  Tensor ph = t.clamp(pred, eps, 1.0 - eps);
  Tensor one = t.constant(s, 1.0);
  Tensor bce = t.scale(t.add(t.mul(truth, t.log(ph)), t.mul(t.sub(one, truth), t.log(t.sub(one, ph)))),
                       -1.0);
  Tensor wbce = t.scale(t.reduce_sum(t.mul(w, bce)), 1.0 / wsum);

  Tensor pg = t.mul(pred, truth);
  Tensor inter = t.reduce_sum(t.mul(w, pg));
  Tensor uni = t.reduce_sum(t.mul(w, t.sub(t.add(pred, truth), pg)));
  Tensor wiou = t.add_const(
      t.scale(t.div(t.add_const(inter, 1.0), t.add_const(uni, 1.0)), -1.0), 1.0);
  return t.add(wbce, wiou);
}

BinaryDataset make_binary_dataset(const Volume& volume, const LabelVolume& labels, VoxClass cls,
                                  double intensity_scale) {
  if (volume.shape != labels.shape) throw ShapeError("make_binary_dataset: shapes differ");
  if (intensity_scale <= 0.0) throw ConfigError("make_binary_dataset: bad intensity scale");
  BinaryDataset ds;
  ds.height = volume.shape[1];
  ds.width = volume.shape[2];
  const size_t plane = static_cast<size_t>(ds.height) * ds.width;
  for (int z = 0; z < volume.shape[0]; ++z) {
    BinarySample s;
    s.image.reserve(plane);
    const float* src = volume.slice(z);
    for (size_t i = 0; i < plane; ++i) s.image.push_back(src[i] / intensity_scale);
    s.mask.resize(plane);
    const uint8_t* lz = labels.classes.data() + static_cast<size_t>(z) * plane;
    for (size_t i = 0; i < plane; ++i) s.mask[i] = lz[i] == static_cast<uint8_t>(cls) ? 1 : 0;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

namespace {

double binary_iou(const std::vector<double>& probs, const std::vector<uint8_t>& mask,
                  double threshold) {
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < mask.size(); ++i) {
    const bool p = probs[i] >= threshold, g = mask[i] != 0;
    if (p && g) ++inter;
    if (p || g) ++uni;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

FinetuneResult finetune(const AdapterModel& model, const BinaryDataset& dataset,
                        const FinetuneConfig& cfg) {
  if (dataset.samples.empty()) throw ConfigError("finetune: empty dataset");
  bool any_positive = false;
  for (const auto& s : dataset.samples) {
    for (uint8_t v : s.mask) {
      if (v) {
        any_positive = true;
        break;
      }
    }
    if (any_positive) break;
  }
  if (!any_positive) {
    throw ConfigError("finetune: degenerate class (no positive pixels in any sample)");
  }
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw ConfigError("finetune: bad epochs/batch");
  if (cfg.val_fraction <= 0.0 || cfg.val_fraction >= 1.0) {
    throw ConfigError("finetune: val_fraction must lie in (0,1)");
  }

  const size_t plane = static_cast<size_t>(dataset.height) * dataset.width;
  FinetuneResult res;
  res.model = model;
  ParamStore& params = res.model.params;

  std::vector<size_t> idx(dataset.samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng split_rng(cfg.seed);
  for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[split_rng.uniform_index(i)]);
  size_t n_val =
      static_cast<size_t>(std::llround(cfg.val_fraction * static_cast<double>(idx.size())));
  n_val = std::max<size_t>(1, std::min(n_val, idx.size() - 1));
  std::vector<size_t> val_idx(idx.begin(), idx.begin() + static_cast<int64_t>(n_val));
  std::vector<size_t> train_idx(idx.begin() + static_cast<int64_t>(n_val), idx.end());

  const auto batch_tensors = [&](const std::vector<size_t>& ids, size_t lo, size_t hi,
                                 Tape& tape) {
    const int b = static_cast<int>(hi - lo);
    std::vector<double> x, g;
    x.reserve(static_cast<size_t>(b) * plane);
    g.reserve(static_cast<size_t>(b) * plane);
    for (size_t k = lo; k < hi; ++k) {
      const auto& s = dataset.samples[ids[k]];
      x.insert(x.end(), s.image.begin(), s.image.end());
      for (uint8_t v : s.mask) g.push_back(v ? 1.0 : 0.0);
    }
    Tensor xt = tape.leaf({b, 1, dataset.height, dataset.width}, std::move(x), false);
    Tensor gt = tape.leaf({b, 1, dataset.height, dataset.width}, std::move(g), false);
    return std::make_pair(xt, gt);
  };

  diff::Adam adam(params, cfg.lr);
  ParamStore best = params;
  int stagnant = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng erng(mix_seed(cfg.seed, static_cast<uint64_t>(epoch)));
    std::vector<size_t> order = train_idx;
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[erng.uniform_index(i)]);

    double loss_sum = 0.0;
    size_t batches = 0;
    for (size_t lo = 0; lo < order.size(); lo += static_cast<size_t>(cfg.batch_size)) {
      const size_t hi = std::min(order.size(), lo + static_cast<size_t>(cfg.batch_size));
      Tape tape;
      auto bound = diff::bind_params(tape, params, true);
      auto [xt, gt] = batch_tensors(order, lo, hi, tape);
      Tensor probs = model_forward(tape, bound, xt, res.model.backbone_cfg, res.model.adapter_cfg);
      Tensor loss =
          structure_loss(tape, probs, gt, cfg.structure_lambda, cfg.structure_pool_k);
      tape.backward(loss);
      std::map<std::string, std::vector<double>> grads;
      for (const auto& [name, tt] : bound) {
        if (tt.requires_grad()) grads[name] = tt.grad();
      }
      adam.step(grads);
      loss_sum += loss.item();
      ++batches;
    }

    double iou_sum = 0.0;
    for (size_t vi : val_idx) {
      Tape tape;
      auto bound = diff::bind_params(tape, params, false);
      std::vector<size_t> one{vi};
      auto [xt, gt] = batch_tensors(one, 0, 1, tape);
      Tensor probs = model_forward(tape, bound, xt, res.model.backbone_cfg, res.model.adapter_cfg);
      iou_sum += binary_iou(probs.value(), dataset.samples[vi].mask, cfg.threshold);
    }
    const double val_iou = iou_sum / static_cast<double>(val_idx.size());

    FinetuneEpoch rec;
    rec.epoch = epoch;
    rec.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    rec.val_iou = val_iou;
    res.history.push_back(rec);

    if (val_iou > res.best_val_iou || res.best_epoch < 0) {
      res.best_val_iou = val_iou;
      res.best_epoch = epoch;
      best = params;
      stagnant = 0;
    } else if (cfg.early_stop_patience > 0) {
      if (++stagnant >= cfg.early_stop_patience) break;
    }
  }
  params = std::move(best);
  return res;
}

std::vector<Image> predict_volume_probs(const AdapterModel& model, const Volume& volume,
                                        double intensity_scale) {
  std::vector<Image> out;
  const size_t plane = static_cast<size_t>(volume.shape[1]) * volume.shape[2];
  for (int z = 0; z < volume.shape[0]; ++z) {
    std::vector<double> x(plane);
    const float* src = volume.slice(z);
    for (size_t i = 0; i < plane; ++i) x[i] = src[i] / intensity_scale;
    Tape tape;
    auto bound = diff::bind_params(tape, model.params, false);
    Tensor xt = tape.leaf({1, 1, volume.shape[1], volume.shape[2]}, std::move(x), false);
    Tensor probs = model_forward(tape, bound, xt, model.backbone_cfg, model.adapter_cfg);
    Image img(volume.shape[1], volume.shape[2]);
    img.data = probs.value();
    out.push_back(std::move(img));
  }
  return out;
}

void save_adapter_checkpoint(const AdapterModel& model, const std::string& path,
                             const std::string& model_id, int64_t step) {
  ParamStore trainables;
  for (const auto& [name, p] : model.params) {
    if (p.trainable) trainables.add(name, p.shape, p.data, true);
  }
  nlohmann::json extra;
  extra["backbone_fingerprint"] = model.backbone_fingerprint;
  save_checkpoint(trainables, path, model_id, step, &extra);
}

void load_adapter_checkpoint(AdapterModel& model, const std::string& path,
                             std::string* model_id) {
  diff::CheckpointInfo info;
  nlohmann::json extra;
  ParamStore loaded = diff::load_checkpoint(path, &info, &extra);
  const uint64_t fp = extra.at("backbone_fingerprint").get<uint64_t>();
  if (fp != model.backbone_fingerprint) {
    throw ConfigError("adapter checkpoint refuses to load: backbone fingerprint mismatch");
  }
  for (const auto& [name, p] : loaded) {
    auto& dst = model.params.at(name);
    if (dst.shape != p.shape) throw ShapeError("adapter checkpoint: shape mismatch for " + name);
    if (!dst.trainable) throw ConfigError("adapter checkpoint: " + name + " is frozen");
    dst.data = p.data;
  }
  if (model_id) *model_id = info.model_id;
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = nlohmann::json{{"stem_width", c.stem_width},
                     {"block_widths", c.block_widths},
                     {"pretrain_steps", c.pretrain_steps},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c = BackboneConfig{};
  if (j.contains("stem_width")) j.at("stem_width").get_to(c.stem_width);
  if (j.contains("block_widths")) j.at("block_widths").get_to(c.block_widths);
  if (j.contains("pretrain_steps")) j.at("pretrain_steps").get_to(c.pretrain_steps);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

void to_json(nlohmann::json& j, const AdapterConfig& c) {
  j = nlohmann::json{{"n_experts", c.n_experts},
                     {"rank", c.rank},
                     {"insertion_points", c.insertion_points},
                     {"conv_kernel", c.conv_kernel},
                     {"init_scale", c.init_scale},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, AdapterConfig& c) {
  c = AdapterConfig{};
  if (j.contains("n_experts")) j.at("n_experts").get_to(c.n_experts);
  if (j.contains("rank")) j.at("rank").get_to(c.rank);
  if (j.contains("insertion_points")) j.at("insertion_points").get_to(c.insertion_points);
  if (j.contains("conv_kernel")) j.at("conv_kernel").get_to(c.conv_kernel);
  if (j.contains("init_scale")) j.at("init_scale").get_to(c.init_scale);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

}  // namespace xct::adapter

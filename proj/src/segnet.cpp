#include "xct/segnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "xct/common.hpp"

namespace xct::segnet {

using diff::ParamStore;
using diff::Shape;
using diff::Tape;
using diff::Tensor;

void UNet25Config::validate() const {
  if (in_channels < 1 || in_channels % 2 == 0) {
    throw ConfigError("unet: in_channels must be odd (center slice is the target)");
  }
  if (base_width < 1 || depth < 1 || n_classes < 2) throw ConfigError("unet: bad width/depth/classes");
  if (patch_size % (1 << depth) != 0) {
    throw ConfigError("unet: patch_size " + std::to_string(patch_size) +
                      " not divisible by 2^depth");
  }
}

void TrainConfig::validate() const {
  if (lr_init < 0.0) throw ConfigError("train: negative learning rate");
  if (plateau_patience < 1) throw ConfigError("train: plateau_patience must be >= 1");
  if (lr_decay_factor <= 0.0 || lr_decay_factor >= 1.0) {
    throw ConfigError("train: lr_decay_factor must lie in (0,1)");
  }
  if (max_epochs < 1 || batch_size < 1) throw ConfigError("train: bad epochs/batch size");
  if (val_fraction <= 0.0 || val_fraction >= 1.0) {
    throw ConfigError("train: val_fraction must lie in (0,1)");
  }
  for (double w : class_weights) {
    if (!(w > 0.0)) throw ConfigError("train: class weights must be strictly positive");
  }
}

diff::Tensor weighted_dice_loss(Tape& tape, Tensor pred, Tensor truth,
                                const std::vector<double>& class_weights, double eps) {
  // copy: recording ops below may reallocate node storage
  const diff::Shape s = pred.shape();
  if (s != truth.shape()) {
    throw ShapeError("weighted_dice_loss: shape mismatch " + diff::shape_str(s) + " vs " +
                     diff::shape_str(truth.shape()));
  }
  if (s.size() != 4) throw ShapeError("weighted_dice_loss: need [N,C,H,W], got " + diff::shape_str(s));
  const int c = s[1];
  if (static_cast<int>(class_weights.size()) != c) {
    throw ConfigError("weighted_dice_loss: " + std::to_string(class_weights.size()) +
                      " weights for " + std::to_string(c) + " classes");
  }
  for (double w : class_weights) {
    if (!(w > 0.0)) throw ConfigError("weighted_dice_loss: weights must be strictly positive");
  }
  // broadcast the per-class weights over the batch/spatial axes
  std::vector<double> wmap(static_cast<size_t>(diff::shape_numel(s)));
  const size_t plane = static_cast<size_t>(s[2]) * s[3];
  for (int n = 0; n < s[0]; ++n) {
    for (int ci = 0; ci < c; ++ci) {
      std::fill_n(wmap.begin() + (static_cast<size_t>(n) * c + ci) * plane, plane,
                  class_weights[ci]);
    }
  }
  Tensor w = tape.leaf(s, std::move(wmap), false);
  Tensor inter = tape.reduce_sum(tape.mul(tape.mul(pred, truth), w));
  Tensor denom = tape.reduce_sum(tape.mul(tape.add(pred, truth), w));
  Tensor ratio = tape.div(tape.add_const(tape.scale(inter, 2.0), eps), tape.add_const(denom, eps));
  return tape.add_const(tape.scale(ratio, -1.0), 1.0);
}

namespace {

void add_conv(ParamStore& store, Rng& rng, const std::string& name, int cin, int cout, int k) {
  const double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
  std::vector<double> w(static_cast<size_t>(cout) * cin * k * k);
  for (double& v : w) v = rng.normal(0.0, std);
  store.add(name + ".w", {cout, cin, k, k}, std::move(w), true);
  store.add(name + ".b", {cout}, std::vector<double>(cout, 0.0), true);
}

Tensor conv_block(Tape& t, const std::map<std::string, Tensor>& p, const std::string& name,
                  Tensor x) {
  return t.relu(t.conv2d(x, p.at(name + ".w"), p.at(name + ".b"), 1, 1));
}

struct LayerDims {
  int cin, cout, k;
};

// layer list for a config; single source for builder and closed-form count
std::vector<std::pair<std::string, LayerDims>> unet_layers(const UNet25Config& cfg) {
  std::vector<std::pair<std::string, LayerDims>> out;
  const int w = cfg.base_width;
  int cin = cfg.in_channels;
  for (int l = 0; l < cfg.depth; ++l) {
    const int cw = w << l;
    out.push_back({"enc" + std::to_string(l) + ".conv1", {cin, cw, 3}});
    out.push_back({"enc" + std::to_string(l) + ".conv2", {cw, cw, 3}});
    cin = cw;
  }
  const int bw = w << cfg.depth;
  out.push_back({"bott.conv1", {cin, bw, 3}});
  out.push_back({"bott.conv2", {bw, bw, 3}});
  for (int l = cfg.depth - 1; l >= 0; --l) {
    const int cw = w << l;
    out.push_back({"dec" + std::to_string(l) + ".up", {cw * 2, cw, 3}});
    out.push_back({"dec" + std::to_string(l) + ".conv1", {cw * 2, cw, 3}});
    out.push_back({"dec" + std::to_string(l) + ".conv2", {cw, cw, 3}});
  }
  out.push_back({"head", {w, cfg.n_classes, 1}});
  return out;
}

}  // namespace

ParamStore build_unet25(const UNet25Config& cfg, uint64_t seed) {
  cfg.validate();
  ParamStore store;
  Rng rng(seed);
  for (const auto& [name, d] : unet_layers(cfg)) add_conv(store, rng, name, d.cin, d.cout, d.k);
  return store;
}

int64_t unet25_param_count(const UNet25Config& cfg) {
  int64_t n = 0;
  for (const auto& [name, d] : unet_layers(cfg)) {
    n += static_cast<int64_t>(d.cout) * d.cin * d.k * d.k + d.cout;
  }
  return n;
}

Tensor unet25_forward(Tape& t, const std::map<std::string, Tensor>& p, Tensor x,
                      const UNet25Config& cfg) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != cfg.in_channels) {
    throw ShapeError("unet25_forward: expected [N," + std::to_string(cfg.in_channels) +
                     ",H,W], got " + diff::shape_str(s));
  }
  std::vector<Tensor> skips;
  Tensor h = x;
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string e = "enc" + std::to_string(l);
    h = conv_block(t, p, e + ".conv1", h);
    h = conv_block(t, p, e + ".conv2", h);
    skips.push_back(h);
    h = t.avg_pool2d(h, 2, 2);
  }
  h = conv_block(t, p, "bott.conv1", h);
  h = conv_block(t, p, "bott.conv2", h);
  for (int l = cfg.depth - 1; l >= 0; --l) {
    const std::string d = "dec" + std::to_string(l);
    h = t.upsample_nearest(h, 2);
    h = conv_block(t, p, d + ".up", h);
    h = t.concat({skips[static_cast<size_t>(l)], h}, 1);
    h = conv_block(t, p, d + ".conv1", h);
    h = conv_block(t, p, d + ".conv2", h);
  }
  Tensor logits = t.conv2d(h, p.at("head.w"), p.at("head.b"), 1, 0);
  return t.softmax(logits, 1);
}

std::vector<Image> slice_window(const Volume& volume, int z, int window) {
  if (window < 1 || window % 2 == 0) throw ConfigError("slice_window: window must be odd");
  if (window > volume.shape[0]) {
    throw ConfigError("slice_window: window " + std::to_string(window) + " exceeds volume depth " +
                      std::to_string(volume.shape[0]));
  }
  if (z < 0 || z >= volume.shape[0]) throw ConfigError("slice_window: z out of range");
  std::vector<Image> out;
  const int half = window / 2;
  for (int dz = -half; dz <= half; ++dz) {
    const int zz = std::clamp(z + dz, 0, volume.shape[0] - 1);  // replicate padding
    out.push_back(slice_image(volume, zz));
  }
  return out;
}

SliceDataset make_slice_dataset(const Volume& volume, const LabelVolume& labels, int window,
                                double intensity_scale) {
  if (volume.shape != labels.shape) throw ShapeError("make_slice_dataset: shapes differ");
  if (intensity_scale <= 0.0) throw ConfigError("make_slice_dataset: bad intensity scale");
  SliceDataset ds;
  ds.channels = window;
  ds.height = volume.shape[1];
  ds.width = volume.shape[2];
  const size_t plane = static_cast<size_t>(ds.height) * ds.width;
  for (int z = 0; z < volume.shape[0]; ++z) {
    SliceSample s;
    s.x.reserve(static_cast<size_t>(window) * plane);
    for (const auto& img : slice_window(volume, z, window)) {
      for (double v : img.data) s.x.push_back(v / intensity_scale);
    }
    s.y.assign(labels.classes.begin() + static_cast<int64_t>(z) * plane,
               labels.classes.begin() + static_cast<int64_t>(z + 1) * plane);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

SliceDataset make_patch_dataset(const Volume& volume, const LabelVolume& labels, int window,
                                int patch, int n_patches, double intensity_scale, uint64_t seed,
                                double defect_fraction) {
  if (defect_fraction < 0.0 || defect_fraction > 1.0) {
    throw ConfigError("make_patch_dataset: defect_fraction outside [0,1]");
  }
  if (volume.shape != labels.shape) throw ShapeError("make_patch_dataset: shapes differ");
  if (patch < 4 || patch > volume.shape[1] || patch > volume.shape[2]) {
    throw ConfigError("make_patch_dataset: bad patch size");
  }
  if (n_patches < 1) throw ConfigError("make_patch_dataset: n_patches must be >= 1");
  const int nz = volume.shape[0], ny = volume.shape[1], nx = volume.shape[2];
  const size_t plane = static_cast<size_t>(ny) * nx;

  std::vector<int64_t> defects;
  for (size_t i = 0; i < labels.classes.size(); ++i) {
    if (labels.classes[i] == static_cast<uint8_t>(VoxClass::pore) ||
        labels.classes[i] == static_cast<uint8_t>(VoxClass::inclusion)) {
      defects.push_back(static_cast<int64_t>(i));
    }
  }

  Rng rng(seed);
  SliceDataset ds;
  ds.channels = window;
  ds.height = patch;
  ds.width = patch;
  for (int k = 0; k < n_patches; ++k) {
    int cz, cy, cx;
    const bool want_defect = rng.uniform() < defect_fraction;
    if (want_defect && !defects.empty()) {
      const int64_t idx = defects[rng.uniform_index(defects.size())];
      cz = static_cast<int>(idx / static_cast<int64_t>(plane));
      cy = static_cast<int>((idx / nx) % ny);
      cx = static_cast<int>(idx % nx);
    } else {
      cz = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(nz)));
      cy = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(ny)));
      cx = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(nx)));
    }
    // uniform placement of the anchor voxel inside the patch, so defects carry
    // no positional prior
    const int oy = std::clamp(cy - static_cast<int>(rng.uniform_index(static_cast<uint64_t>(patch))),
                              0, ny - patch);
    const int ox = std::clamp(cx - static_cast<int>(rng.uniform_index(static_cast<uint64_t>(patch))),
                              0, nx - patch);

    SliceSample s;
    s.x.reserve(static_cast<size_t>(window) * patch * patch);
    for (const auto& img : slice_window(volume, cz, window)) {
      for (int y = 0; y < patch; ++y) {
        for (int x = 0; x < patch; ++x) s.x.push_back(img.at(oy + y, ox + x) / intensity_scale);
      }
    }
    s.y.reserve(static_cast<size_t>(patch) * patch);
    const uint8_t* lz = labels.classes.data() + static_cast<size_t>(cz) * plane;
    for (int y = 0; y < patch; ++y) {
      for (int x = 0; x < patch; ++x) s.y.push_back(lz[static_cast<size_t>(oy + y) * nx + ox + x]);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,val_dice,lr,reset_flag\n";
  for (const auto& e : history) {
    os << e.epoch << "," << e.train_loss << "," << e.val_loss << "," << e.val_dice << "," << e.lr
       << "," << (e.reset ? 1 : 0) << "\n";
  }
  return os.str();
}

namespace {

std::vector<double> one_hot(const std::vector<uint8_t>& y, int n_classes, size_t plane) {
  std::vector<double> out(static_cast<size_t>(n_classes) * plane, 0.0);
  for (size_t i = 0; i < plane; ++i) out[static_cast<size_t>(y[i]) * plane + i] = 1.0;
  return out;
}

// macro-average soft Dice over classes present in the truth
double macro_dice(const std::vector<double>& probs, const std::vector<double>& onehot,
                  int n_classes, size_t batch_plane) {
  double total = 0.0;
  int used = 0;
  for (int c = 0; c < n_classes; ++c) {
    // data layout [N,C,H,W]: class c occupies stripes of `plane` per sample
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    const size_t n = probs.size() / (static_cast<size_t>(n_classes) * batch_plane);
    for (size_t b = 0; b < n; ++b) {
      const size_t off = (b * n_classes + static_cast<size_t>(c)) * batch_plane;
      for (size_t i = 0; i < batch_plane; ++i) {
        inter += probs[off + i] * onehot[off + i];
        psum += probs[off + i];
        gsum += onehot[off + i];
      }
    }
    if (gsum > 0.0) {
      total += (2.0 * inter + 1e-6) / (psum + gsum + 1e-6);
      ++used;
    }
  }
  return used > 0 ? total / used : 1.0;
}

}  // namespace

std::vector<uint8_t> argmax_classes(const std::vector<double>& probs, int n_classes,
                                    size_t plane) {
  std::vector<uint8_t> out(plane, 0);
  for (size_t i = 0; i < plane; ++i) {
    int best = 0;
    double bv = probs[i];
    for (int c = 1; c < n_classes; ++c) {
      const double v = probs[static_cast<size_t>(c) * plane + i];
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    out[i] = static_cast<uint8_t>(best);
  }
  return out;
}

TrainResult train(const UNet25Config& net_cfg, ParamStore params, const SliceDataset& dataset,
                  const TrainConfig& cfg) {
  net_cfg.validate();
  cfg.validate();
  if (dataset.samples.empty()) throw ConfigError("train: empty dataset");
  if (dataset.channels != net_cfg.in_channels) {
    throw ShapeError("train: dataset channels " + std::to_string(dataset.channels) +
                     " vs net in_channels " + std::to_string(net_cfg.in_channels));
  }
  const int n_classes = net_cfg.n_classes;
  const size_t plane = static_cast<size_t>(dataset.height) * dataset.width;

  // deterministic split
  std::vector<size_t> idx(dataset.samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng split_rng(cfg.seed);
  for (size_t i = idx.size(); i > 1; --i) {
    std::swap(idx[i - 1], idx[split_rng.uniform_index(i)]);
  }
  size_t n_val = static_cast<size_t>(std::llround(cfg.val_fraction * static_cast<double>(idx.size())));
  n_val = std::max<size_t>(1, std::min(n_val, idx.size() - 1));
  std::vector<size_t> val_idx(idx.begin(), idx.begin() + static_cast<int64_t>(n_val));
  std::vector<size_t> train_idx(idx.begin() + static_cast<int64_t>(n_val), idx.end());

  // inverse-frequency class weights from the training split unless configured
  std::vector<double> weights = cfg.class_weights;
  if (weights.empty()) {
    std::vector<int64_t> counts(static_cast<size_t>(n_classes), 0);
    for (size_t si : train_idx) {
      for (uint8_t c : dataset.samples[si].y) ++counts[c];
    }
    weights.resize(static_cast<size_t>(n_classes));
    double sum = 0.0;
    for (int c = 0; c < n_classes; ++c) {
      weights[static_cast<size_t>(c)] = 1.0 / static_cast<double>(std::max<int64_t>(counts[static_cast<size_t>(c)], 1));
      sum += weights[static_cast<size_t>(c)];
    }
    for (double& w : weights) w *= n_classes / sum;  // mean weight 1
  }

  const auto batch_tensors = [&](const std::vector<size_t>& ids, size_t lo, size_t hi, Tape& tape) {
    const int b = static_cast<int>(hi - lo);
    std::vector<double> x;
    x.reserve(static_cast<size_t>(b) * dataset.channels * plane);
    std::vector<double> g;
    g.reserve(static_cast<size_t>(b) * n_classes * plane);
    for (size_t k = lo; k < hi; ++k) {
      const auto& s = dataset.samples[ids[k]];
      x.insert(x.end(), s.x.begin(), s.x.end());
      const auto oh = one_hot(s.y, n_classes, plane);
      g.insert(g.end(), oh.begin(), oh.end());
    }
    Tensor xt = tape.leaf({b, dataset.channels, dataset.height, dataset.width}, std::move(x), false);
    Tensor gt = tape.leaf({b, n_classes, dataset.height, dataset.width}, std::move(g), false);
    return std::make_pair(xt, gt);
  };

  diff::Adam adam(params, cfg.lr_init);
  TrainResult res;
  res.class_weights = weights;
  ParamStore best = params;  // falls back to the initial state
  double best_val_loss = std::numeric_limits<double>::infinity();
  int stagnant = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    // shuffle training order
    Rng erng(mix_seed(cfg.seed, static_cast<uint64_t>(epoch)));
    std::vector<size_t> order = train_idx;
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[erng.uniform_index(i)]);

    double train_loss_sum = 0.0;
    size_t n_batches = 0;
    bool diverged = false;
    for (size_t lo = 0; lo < order.size() && !diverged; lo += static_cast<size_t>(cfg.batch_size)) {
      const size_t hi = std::min(order.size(), lo + static_cast<size_t>(cfg.batch_size));
      try {
        Tape tape;
        auto bound = diff::bind_params(tape, params, true);
        auto [xt, gt] = batch_tensors(order, lo, hi, tape);
        Tensor probs = unet25_forward(tape, bound, xt, net_cfg);
        Tensor loss = weighted_dice_loss(tape, probs, gt, weights, cfg.dice_eps);
        tape.backward(loss);
        std::map<std::string, std::vector<double>> grads;
        for (const auto& [name, t] : bound) {
          if (t.requires_grad()) grads[name] = t.grad();
        }
        adam.step(grads);
        train_loss_sum += loss.item();
        ++n_batches;
      } catch (const NumericError&) {
        diverged = true;  // divergence: abort with the last finite state
      }
    }

    if (diverged) {
      res.aborted_nonfinite = true;
      break;
    }

    // validation pass
    double val_loss_sum = 0.0, val_dice_sum = 0.0;
    size_t val_batches = 0;
    try {
      for (size_t lo = 0; lo < val_idx.size(); lo += static_cast<size_t>(cfg.batch_size)) {
        const size_t hi = std::min(val_idx.size(), lo + static_cast<size_t>(cfg.batch_size));
        Tape tape;
        auto bound = diff::bind_params(tape, params, false);
        auto [xt, gt] = batch_tensors(val_idx, lo, hi, tape);
        Tensor probs = unet25_forward(tape, bound, xt, net_cfg);
        Tensor loss = weighted_dice_loss(tape, probs, gt, weights, cfg.dice_eps);
        val_loss_sum += loss.item() * static_cast<double>(hi - lo);
        val_dice_sum +=
            macro_dice(probs.value(), gt.value(), n_classes, plane) * static_cast<double>(hi - lo);
        ++val_batches;
      }
    } catch (const NumericError&) {
      res.aborted_nonfinite = true;
      break;
    }
    const double val_loss = val_loss_sum / static_cast<double>(val_idx.size());
    const double val_dice = val_dice_sum / static_cast<double>(val_idx.size());

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = n_batches ? train_loss_sum / static_cast<double>(n_batches) : 0.0;
    rec.val_loss = val_loss;
    rec.val_dice = val_dice;
    rec.lr = adam.lr();

    if (val_dice > res.best_val_dice || res.best_epoch < 0) {
      res.best_val_dice = val_dice;
      res.best_epoch = epoch;
      best = params;
    }

    if (val_loss < best_val_loss - 1e-12) {
      best_val_loss = val_loss;
      stagnant = 0;
    } else {
      ++stagnant;
      if (stagnant >= cfg.plateau_patience) {
        adam.set_lr(adam.lr() * cfg.lr_decay_factor);
        adam.reset_state();  // moments refer to the abandoned trajectory
        params = best;
        stagnant = 0;
        rec.reset = true;
        rec.lr = adam.lr();
      }
    }
    res.history.push_back(rec);
  }

  res.params = std::move(best);
  return res;
}

LabelVolume predict_volume(const UNet25Config& cfg, const ParamStore& params,
                           const Volume& volume, double intensity_scale) {
  cfg.validate();
  LabelVolume out(volume.shape[0], volume.shape[1], volume.shape[2], volume.voxel_pitch_um);
  const size_t plane = static_cast<size_t>(volume.shape[1]) * volume.shape[2];
  for (int z = 0; z < volume.shape[0]; ++z) {
    std::vector<double> x;
    x.reserve(static_cast<size_t>(cfg.in_channels) * plane);
    for (const auto& img : slice_window(volume, z, cfg.in_channels)) {
      for (double v : img.data) x.push_back(v / intensity_scale);
    }
    Tape tape;
    auto bound = diff::bind_params(tape, params, false);
    Tensor xt = tape.leaf({1, cfg.in_channels, volume.shape[1], volume.shape[2]}, std::move(x),
                          false);
    Tensor probs = unet25_forward(tape, bound, xt, cfg);
    const auto cls = argmax_classes(probs.value(), cfg.n_classes, plane);
    std::copy(cls.begin(), cls.end(), out.classes.begin() + static_cast<int64_t>(z) * plane);
  }
  return out;
}

}  // namespace xct::segnet

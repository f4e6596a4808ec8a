#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xct/params.hpp"
#include "xct/tensor.hpp"
#include "xct/volume.hpp"

namespace xct::segnet {

struct UNet25Config {
  int in_channels = 5;  // consecutive slices; odd, center slice is the target
  int base_width = 8;
  int depth = 3;
  int n_classes = 4;
  int patch_size = 64;  // must be divisible by 2^depth

  void validate() const;
};

struct TrainConfig {
  double lr_init = 2e-4;
  int plateau_patience = 15;
  double lr_decay_factor = 0.5;
  int max_epochs = 150;
  int batch_size = 8;
  std::vector<double> class_weights;  // empty: inverse class frequency of the training split
  double val_fraction = 0.2;
  uint64_t seed = 0;
  double dice_eps = 1e-6;

  void validate() const;
};

// Weighted Dice loss, 1 - (2 sum_c w_c <p_c,g_c> + eps) / (sum_c w_c (|p_c|+|g_c|) + eps).
// pred and truth are [N,C,H,W]; truth one-hot. A class absent from both
// contributes nothing (the eps smoothing covers the all-empty case).
diff::Tensor weighted_dice_loss(diff::Tape& tape, diff::Tensor pred, diff::Tensor truth,
                                const std::vector<double>& class_weights, double eps = 1e-6);

// Kaiming-initialized parameters for the encoder/decoder stack; all trainable.
diff::ParamStore build_unet25(const UNet25Config& cfg, uint64_t seed);

// (batch, in_channels, H, W) -> (batch, n_classes, H, W) class probabilities.
diff::Tensor unet25_forward(diff::Tape& tape, const std::map<std::string, diff::Tensor>& params,
                            diff::Tensor x, const UNet25Config& cfg);

// Closed-form parameter count for a config (kept in lockstep with the builder).
int64_t unet25_param_count(const UNet25Config& cfg);

// Channels z-2..z+2 (for window 5); boundary slices replicate-padded.
std::vector<Image> slice_window(const Volume& volume, int z, int window = 5);

struct SliceSample {
  std::vector<double> x;      // [window, H, W]
  std::vector<uint8_t> y;     // [H, W] class ids
};

struct SliceDataset {
  int channels = 0, height = 0, width = 0;
  std::vector<SliceSample> samples;
};

// One sample per z slice: the 5-slice window against the center-slice labels.
// Intensities are divided by `intensity_scale` (nominal material attenuation).
SliceDataset make_slice_dataset(const Volume& volume, const LabelVolume& labels, int window,
                                double intensity_scale);

// Patch-based training set: a `defect_fraction` share of patches is centered
// on defect voxels (pore or inclusion), the rest are uniform over the volume.
// Patch windows are shifted to stay inside the slice.
SliceDataset make_patch_dataset(const Volume& volume, const LabelVolume& labels, int window,
                                int patch, int n_patches, double intensity_scale, uint64_t seed,
                                double defect_fraction = 0.5);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_dice = 0.0;
  double lr = 0.0;
  bool reset = false;  // lr reduced and parameters restored this epoch
};

std::string history_csv(const std::vector<EpochRecord>& history);

struct TrainResult {
  diff::ParamStore params;  // best-validation-Dice checkpoint
  std::vector<EpochRecord> history;
  double best_val_dice = 0.0;
  int best_epoch = -1;
  bool aborted_nonfinite = false;
  std::vector<double> class_weights;  // weights actually used
};

// Adam with the plateau schedule: when validation loss stagnates for
// plateau_patience consecutive epochs, the learning rate is decayed and
// parameters reset to the best checkpoint so far.
TrainResult train(const UNet25Config& net_cfg, diff::ParamStore params,
                  const SliceDataset& dataset, const TrainConfig& cfg);

// Argmax over the class axis of [C,H,W] probabilities.
std::vector<uint8_t> argmax_classes(const std::vector<double>& probs, int n_classes,
                                    size_t plane);

// Per-slice inference over a volume -> predicted label volume.
LabelVolume predict_volume(const UNet25Config& cfg, const diff::ParamStore& params,
                           const Volume& volume, double intensity_scale);

}  // namespace xct::segnet

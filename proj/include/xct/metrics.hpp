#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "xct/volume.hpp"

namespace xct::metrics {

using Mask = std::vector<uint8_t>;  // binary, 0/1

Mask class_mask(const LabelVolume& labels, VoxClass cls);

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

ConfusionCounts confusion_counts(const Mask& pred, const Mask& truth);

// Both-empty masks score 1 (perfect-agreement convention, recorded in reports).
double iou(const Mask& pred, const Mask& truth);
double dice(const Mask& pred, const Mask& truth);

struct LayerEntry {
  int z = 0;
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0, iou = 0.0;
  bool included = true;    // false: no truth and no predicted positives (excluded from means)
  bool pred_empty = false; // zero predicted positives on this layer
};

struct LayerMetrics {
  std::vector<LayerEntry> layers;
  int n_layers = 0;
  int n_included = 0;
  double mean_precision = 0.0, std_precision = 0.0;
  double mean_recall = 0.0, std_recall = 0.0;
  double mean_f1 = 0.0, std_f1 = 0.0;
  double mean_iou = 0.0, std_iou = 0.0;
};

// Per-slice precision/recall/F1/IoU with means and population stds over the
// included layers. Degenerate layers (empty truth and prediction) are excluded;
// layers with truth positives but an empty prediction score 0.
LayerMetrics layer_metrics(const LabelVolume& pred, const LabelVolume& truth, VoxClass cls);

struct FrechetConfig {
  int n_crops = 7;
  int crop_size = 150;
  std::string feature_extractor = "patch-stats";
  uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const FrechetConfig& c);
void from_json(const nlohmann::json& j, FrechetConfig& c);

// ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), unbiased covariances with
// eps*I (eps=1e-6) regularization, PSD square root via eigendecomposition.
double frechet_distance(const std::vector<std::vector<double>>& features_a,
                        const std::vector<std::vector<double>>& features_b);

// 8-D texture descriptor per foreground crop:
// [mean, std, grad-mag mean, grad-mag std, high-pass rms in 4 radial bands].
std::vector<double> patch_descriptor(const Image& crop);

// Crops drawn uniformly from positions fully inside the foreground mask.
std::vector<std::vector<double>> patch_features(const Image& image, const Mask& foreground,
                                                const FrechetConfig& cfg);

// One crop per slice, slices spread over those with enough foreground
// (the paper-style "n crops from n separate images" protocol).
std::vector<std::vector<double>> patch_features(const Volume& volume, const LabelVolume& labels,
                                                const FrechetConfig& cfg);

// Standard SSIM, Gaussian window (sigma = window/7.33, i.e. 1.5 at 11x11),
// averaged over fully-interior window positions.
double ssim(const Image& a, const Image& b, int window = 11, double dynamic_range = 1.0);

// Mean absolute error of the x-cycle plus mean absolute error of the y-cycle.
double cycle_consistency_loss(const std::vector<Image>& x, const std::vector<Image>& x_rec,
                              const std::vector<Image>& y, const std::vector<Image>& y_rec);

// Spearman rank correlation with average ranks for ties.
double spearman_rank_correlation(const std::vector<double>& a, const std::vector<double>& b);

// The experiment output contract: per-layer records plus aggregates, with
// provenance and the conventions used.
struct MetricsReport {
  std::string dataset_id;
  std::string model_id;
  std::string class_name;
  LayerMetrics layers;
  double volume_iou = 0.0;
  double volume_dice = 0.0;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  std::string to_csv() const;  // header + one row per layer, flat fields
};

}  // namespace xct::metrics

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "xct/params.hpp"
#include "xct/tensor.hpp"
#include "xct/volume.hpp"

namespace xct::adapter {

// Small convolutional image encoder standing in for the frozen foundation
// backbone: stem (pooled /2), two blocks at /2, two blocks at /4.
struct BackboneConfig {
  int stem_width = 24;
  std::vector<int> block_widths = {48, 48, 112, 112};
  int pretrain_steps = 30;  // denoising pretext task steps before freezing
  uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

struct AdapterConfig {
  int n_experts = 8;
  int rank = 4;
  std::vector<int> insertion_points = {1, 3};  // backbone block indices
  int conv_kernel = 3;       // gate conv size
  double init_scale = 0.02;  // W_E / expert init std
  uint64_t seed = 0;

  void validate(int n_blocks) const;
};

void to_json(nlohmann::json& j, const AdapterConfig& c);
void from_json(const nlohmann::json& j, AdapterConfig& c);

// Backbone with every parameter frozen; forward produces per-block embeddings.
struct FrozenBackbone {
  BackboneConfig cfg;
  diff::ParamStore params;
  uint64_t fingerprint = 0;  // content hash of the frozen weights
};

// Pretrains the encoder on a synthetic denoising task, then freezes it.
FrozenBackbone make_pretrained_backbone(const BackboneConfig& cfg);

// Complete per-class binary segmenter: frozen backbone + Conv-LoRA adapters +
// trainable mask decoder head, all in one store partitioned by trainable flag.
struct AdapterModel {
  BackboneConfig backbone_cfg;
  AdapterConfig adapter_cfg;
  diff::ParamStore params;
  uint64_t backbone_fingerprint = 0;
};

AdapterModel build_adapter_model(const FrozenBackbone& backbone, const AdapterConfig& cfg);

// One adapted block: H = W0 x + W_D(Conv(sum_i gate_i(z) * N_i(z))), z = W_E x.
// Gate scores come from a conv over z, softmaxed across the n experts per
// spatial location. W_D starts at zero, so H == W0 x at initialization.
diff::Tensor adapter_forward(diff::Tape& tape, const std::map<std::string, diff::Tensor>& p,
                             const std::string& frozen_conv, const std::string& adapter_prefix,
                             diff::Tensor x, const AdapterConfig& cfg);

// Full model forward: [N,1,H,W] image -> [N,1,H,W] probability map.
// H and W must be divisible by 4.
diff::Tensor model_forward(diff::Tape& tape, const std::map<std::string, diff::Tensor>& p,
                           diff::Tensor x, const BackboneConfig& bb, const AdapterConfig& ad);

// Weighted BCE + weighted IoU with boundary-emphasis weights
// w = 1 + lambda * |avg_pool(truth, k) - truth|. pred, truth: [N,1,H,W].
diff::Tensor structure_loss(diff::Tape& tape, diff::Tensor pred, diff::Tensor truth,
                            double lambda = 5.0, int pool_k = 15, double eps = 1e-7);

using diff::count_trainable_fraction;

struct BinarySample {
  std::vector<double> image;  // [H*W]
  std::vector<uint8_t> mask;  // [H*W], 0/1
};

struct BinaryDataset {
  int height = 0, width = 0;
  std::vector<BinarySample> samples;
};

// One (slice, class-mask) sample per z of a volume.
BinaryDataset make_binary_dataset(const Volume& volume, const LabelVolume& labels, VoxClass cls,
                                  double intensity_scale);

struct FinetuneConfig {
  int epochs = 20;
  double lr = 3e-4;
  int batch_size = 4;
  double val_fraction = 0.25;
  int early_stop_patience = 0;  // 0 disables early stop on val IoU
  double structure_lambda = 5.0;
  int structure_pool_k = 15;
  double threshold = 0.5;
  uint64_t seed = 0;
};

struct FinetuneEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double val_iou = 0.0;
};

struct FinetuneResult {
  AdapterModel model;  // best-validation-IoU checkpoint
  std::vector<FinetuneEpoch> history;
  double best_val_iou = 0.0;
  int best_epoch = -1;
};

// Trains only adapters + head; the frozen backbone is bit-identical
// before and after. A dataset whose samples contain no positive pixels at all
// raises a "degenerate class" error.
FinetuneResult finetune(const AdapterModel& model, const BinaryDataset& dataset,
                        const FinetuneConfig& cfg);

// Per-slice inference: probability map stack for a volume.
std::vector<Image> predict_volume_probs(const AdapterModel& model, const Volume& volume,
                                        double intensity_scale);

// Checkpoints hold only the trainable entries plus the backbone fingerprint;
// loading onto a model with a different frozen backbone is refused.
void save_adapter_checkpoint(const AdapterModel& model, const std::string& path,
                             const std::string& model_id, int64_t step);
void load_adapter_checkpoint(AdapterModel& model, const std::string& path,
                             std::string* model_id = nullptr);

}  // namespace xct::adapter

#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "xct/tensor.hpp"

namespace xct::diff {

// Named parameter tensors partitioned into frozen and trainable sets.
// Iteration order is name-sorted, so fingerprints and checkpoints are stable.
class ParamStore {
 public:
  struct Param {
    Shape shape;
    std::vector<double> data;
    bool trainable = false;
  };

  Param& add(const std::string& name, Shape shape, std::vector<double> data, bool trainable);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  void set_trainable(const std::string& name, bool trainable) { at(name).trainable = trainable; }
  void freeze_all();

  size_t entry_count() const { return params_.size(); }
  int64_t total_count() const;
  int64_t trainable_count() const;
  std::vector<std::string> names() const;
  std::vector<std::string> trainable_names() const;
  std::vector<std::string> frozen_names() const;

  // Content hash over (name, shape, raw values); frozen_only restricts the
  // digest to the frozen partition (backbone fingerprints).
  uint64_t fingerprint(bool frozen_only = false) const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Param> params_;
};

// trainable_count / total_count, exactly; empty store is an error.
double count_trainable_fraction(const ParamStore& store);

// Leafs every parameter onto the tape; requires_grad = trainable && train_mode.
std::map<std::string, Tensor> bind_params(Tape& tape, const ParamStore& store, bool train_mode);

// Flat archive: magic, JSON manifest {model_id, step, frozen_names,
// trainable_names, entries:[{name, shape, dtype, offset, count}]}, then raw
// little-endian float64 payload.
void save_checkpoint(const ParamStore& store, const std::string& path,
                     const std::string& model_id, int64_t step,
                     const nlohmann::json* extra = nullptr);

struct CheckpointInfo {
  std::string model_id;
  int64_t step = 0;
};

ParamStore load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr,
                           nlohmann::json* extra = nullptr);

// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
class Adam {
 public:
  Adam(ParamStore& store, double lr) : store_(&store), lr_(lr) {}

  // Applies one update to every trainable parameter present in `grads`.
  void step(const std::map<std::string, std::vector<double>>& grads);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void reset_state();

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  ParamStore* store_;
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace xct::diff

#include "xct/params.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace xct::diff {

ParamStore::Param& ParamStore::add(const std::string& name, Shape shape,
                                   std::vector<double> data, bool trainable) {
  if (params_.count(name)) throw ConfigError("duplicate parameter: " + name);
  if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
    throw ShapeError("param " + name + ": " + std::to_string(data.size()) +
                     " values for shape " + shape_str(shape));
  }
  auto& p = params_[name];
  p.shape = std::move(shape);
  p.data = std::move(data);
  p.trainable = trainable;
  return p;
}

ParamStore::Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const ParamStore::Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

void ParamStore::freeze_all() {
  for (auto& [_, p] : params_) p.trainable = false;
}

int64_t ParamStore::total_count() const {
  int64_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<int64_t>(p.data.size());
  return n;
}

int64_t ParamStore::trainable_count() const {
  int64_t n = 0;
  for (const auto& [_, p] : params_) {
    if (p.trainable) n += static_cast<int64_t>(p.data.size());
  }
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : params_) out.push_back(k);
  return out;
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [k, p] : params_) {
    if (p.trainable) out.push_back(k);
  }
  return out;
}

std::vector<std::string> ParamStore::frozen_names() const {
  std::vector<std::string> out;
  for (const auto& [k, p] : params_) {
    if (!p.trainable) out.push_back(k);
  }
  return out;
}

uint64_t ParamStore::fingerprint(bool frozen_only) const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, p] : params_) {
    if (frozen_only && p.trainable) continue;
    h = fnv1a64(name, h);
    h = fnv1a64(p.shape.data(), p.shape.size() * sizeof(int), h);
    h = fnv1a64(p.data.data(), p.data.size() * sizeof(double), h);
  }
  return h;
}

double count_trainable_fraction(const ParamStore& store) {
  const int64_t total = store.total_count();
  if (total == 0) throw ConfigError("count_trainable_fraction: empty parameter store");
  return static_cast<double>(store.trainable_count()) / static_cast<double>(total);
}

std::map<std::string, Tensor> bind_params(Tape& tape, const ParamStore& store, bool train_mode) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, p] : store) {
    out.emplace(name, tape.leaf(p.shape, p.data, train_mode && p.trainable));
  }
  return out;
}

namespace {
constexpr char kMagic[] = "XCTCKPT1\n";
}

void save_checkpoint(const ParamStore& store, const std::string& path,
                     const std::string& model_id, int64_t step, const nlohmann::json* extra) {
  nlohmann::json header;
  header["model_id"] = model_id;
  header["step"] = step;
  header["frozen_names"] = store.frozen_names();
  header["trainable_names"] = store.trainable_names();
  if (extra) header["extra"] = *extra;
  nlohmann::json entries = nlohmann::json::array();
  int64_t offset = 0;
  for (const auto& [name, p] : store) {
    entries.push_back({{"name", name},
                       {"shape", p.shape},
                       {"dtype", "float64"},
                       {"offset", offset},
                       {"count", p.data.size()}});
    offset += static_cast<int64_t>(p.data.size());
  }
  header["entries"] = entries;
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write checkpoint: " + path);
  f.write(kMagic, sizeof(kMagic) - 1);
  const uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, p] : store) {
    f.write(reinterpret_cast<const char*>(p.data.data()),
            static_cast<std::streamsize>(p.data.size() * sizeof(double)));
  }
}

ParamStore load_checkpoint(const std::string& path, CheckpointInfo* info,
                           nlohmann::json* extra) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read checkpoint: " + path);
  char magic[sizeof(kMagic) - 1];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw ConfigError("not a checkpoint file: " + path);
  }
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw ConfigError("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(hs);

  if (info) {
    info->model_id = header.at("model_id").get<std::string>();
    info->step = header.at("step").get<int64_t>();
  }
  if (extra && header.contains("extra")) *extra = header["extra"];

  std::vector<std::string> trainable =
      header.at("trainable_names").get<std::vector<std::string>>();
  ParamStore store;
  for (const auto& e : header.at("entries")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto count = e.at("count").get<size_t>();
    std::vector<double> data(count);
    f.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(count * sizeof(double)));
    if (!f) throw ConfigError("truncated checkpoint payload: " + path);
    const bool is_trainable =
        std::find(trainable.begin(), trainable.end(), name) != trainable.end();
    store.add(name, shape, std::move(data), is_trainable);
  }
  return store;
}

void Adam::step(const std::map<std::string, std::vector<double>>& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    auto& p = store_->at(name);
    if (!p.trainable) continue;
    if (g.size() != p.data.size()) {
      throw ShapeError("adam: gradient size mismatch for " + name);
    }
    auto& st = state_[name];
    if (st.m.empty()) {
      st.m.assign(g.size(), 0.0);
      st.v.assign(g.size(), 0.0);
    }
    for (size_t i = 0; i < g.size(); ++i) {
      st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g[i];
      st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      p.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::reset_state() {
  state_.clear();
  t_ = 0;
}

}  // namespace xct::diff

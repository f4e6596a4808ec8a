#include "xct/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "xct/common.hpp"

namespace fs = std::filesystem;

namespace xct::pipeline {

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{
      {"name", s.name}, {"role", s.role}, {"phantom", s.phantom}, {"scan", s.scan}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  j.at("name").get_to(s.name);
  j.at("role").get_to(s.role);
  j.at("phantom").get_to(s.phantom);
  j.at("scan").get_to(s.scan);
}

void to_json(nlohmann::json& j, const SuiteSpec& s) {
  j = nlohmann::json{{"datasets", s.datasets},
                     {"frechet", s.frechet},
                     {"intensity_scale", s.intensity_scale}};
}

void from_json(const nlohmann::json& j, SuiteSpec& s) {
  s = SuiteSpec{};
  j.at("datasets").get_to(s.datasets);
  if (j.contains("frechet")) j.at("frechet").get_to(s.frechet);
  if (j.contains("intensity_scale")) j.at("intensity_scale").get_to(s.intensity_scale);
}

SuiteSpec SuiteSpec::desk_default(uint64_t seed) {
  SuiteSpec out;
  out.intensity_scale = 0.02;
  out.frechet.n_crops = 21;
  out.frechet.crop_size = 20;
  out.frechet.seed = 77;

  phantom::PhantomSpec ph;
  ph.grid_shape = {64, 64, 64};
  ph.part_shape = phantom::PartShape::cylinder(0.78, 0.94);
  ph.mu_material = 0.02;
  ph.mu_inclusion = 0.04;
  // sub-2-voxel flaws sit below the FBP resolution at this grid; keep the
  // library inside the detectable regime
  ph.flaw_r_min = 1.8;
  ph.flaw_r_max = 3.5;

  tomo::ScanConfig sc;
  sc.n_views = 720;
  sc.angular_range_deg = 180.0;
  sc.detector_bins = 96;
  sc.apodization = tomo::Apodization::hann;

  struct Row {
    const char* name;
    const char* role;
    double pore, incl, sigma, beam_hardening;
    int subsample;
    tomo::Apodization apo;
  };
  // sinogram sigma maps to image noise at roughly 0.42x with 720-view Hann FBP
  const auto hann = tomo::Apodization::hann;
  const auto ramp = tomo::Apodization::none;
  const Row rows[] = {
      // training pair: Tr-1-like (pores ~3%, inclusions <1%) and Tr-2-like
      // (pores ~0.8%, none), with distinct noise profiles
      {"tr1", kRoleTrain, 0.030, 0.006, 0.05, 0.0, 1, hann},
      {"tr2", kRoleTrain, 0.008, 0.000, 0.15, 0.0, 1, hann},
      // in-distribution test: tr1 configuration, new seed
      {"te_ind", kRoleTestInd, 0.030, 0.006, 0.05, 0.0, 1, hann},
      // OoD axes: much less noise, much more noise, no inclusions, and
      // 12x-subsampled views reconstructed with the plain ramp (streaks)
      {"te_low_noise", kRoleTestOod, 0.020, 0.002, 0.005, 0.0, 1, hann},
      {"te_high_noise", kRoleTestOod, 0.020, 0.002, 0.40, 0.0, 1, hann},
      {"te_no_incl", kRoleTestOod, 0.040, 0.000, 0.25, 0.0, 1, hann},
      {"te_sparse", kRoleTestOod, 0.030, 0.006, 0.05, 0.0, 12, ramp},
      // disjoint-noise regime for the forgetting scenario
      {"te_noisyreg", kRoleTestOodTarget, 0.030, 0.005, 0.40, 0.3, 1, hann},
  };
  uint64_t k = 0;
  for (const auto& r : rows) {
    DatasetSpec d;
    d.name = r.name;
    d.role = r.role;
    d.phantom = ph;
    d.phantom.pore_density_target = r.pore;
    d.phantom.inclusion_density_target = r.incl;
    d.phantom.seed = mix_seed(seed, 2 * k);
    d.scan = sc;
    d.scan.noise = r.sigma > 0.0 ? tomo::NoiseModel::gaussian(r.sigma) : tomo::NoiseModel::none();
    d.scan.beam_hardening_strength = r.beam_hardening;
    d.scan.subsample_factor = r.subsample;
    d.scan.apodization = r.apo;
    d.scan.seed = mix_seed(seed, 2 * k + 1);
    out.datasets.push_back(std::move(d));
    ++k;
  }
  return out;
}

const DatasetEntry& DatasetSuite::at(const std::string& name) const {
  auto it = datasets.find(name);
  if (it == datasets.end()) throw ConfigError("suite: no dataset named " + name);
  return it->second;
}

std::vector<std::string> DatasetSuite::names_with_role(const std::string& role) const {
  std::vector<std::string> out;
  for (const auto& d : spec.datasets) {
    if (d.role == role) out.push_back(d.name);
  }
  return out;
}

std::vector<std::string> DatasetSuite::test_names() const {
  std::vector<std::string> out;
  for (const auto& d : spec.datasets) {
    if (d.role.rfind("test", 0) == 0) out.push_back(d.name);
  }
  return out;
}

DatasetSuite build_suite(const SuiteSpec& spec) {
  if (spec.datasets.empty()) throw ConfigError("build_suite: no datasets in spec");
  // test sets must not share (config, seed) with a training set
  for (const auto& a : spec.datasets) {
    if (a.role.rfind("test", 0) != 0) continue;
    for (const auto& b : spec.datasets) {
      if (b.role != kRoleTrain) continue;
      nlohmann::json ja = a, jb = b;
      ja.erase("name");
      ja.erase("role");
      jb.erase("name");
      jb.erase("role");
      if (ja == jb) {
        throw ConfigError("build_suite: test dataset " + a.name +
                          " duplicates training dataset " + b.name + " (config and seed)");
      }
    }
  }

  DatasetSuite suite;
  suite.spec = spec;
  for (const auto& d : spec.datasets) {
    DatasetEntry e;
    e.spec = d;
    auto gen = phantom::generate_phantom(d.phantom);
    e.labels = std::move(gen.labels);
    tomo::MuMap mu{d.phantom.mu_material, d.phantom.mu_inclusion};
    e.recon = tomo::simulate_scan(e.labels, mu, d.scan);
    e.pore_density = phantom::defect_volume_density(e.labels, VoxClass::pore);
    e.inclusion_density = phantom::defect_volume_density(e.labels, VoxClass::inclusion);
    suite.datasets.emplace(d.name, std::move(e));
  }

  // Frechet scores of every dataset against each training set, computed on
  // normalized intensities so the descriptor scale is O(1)
  const auto normalized = [&](const Volume& v) {
    Volume out = v;
    const float inv = static_cast<float>(1.0 / spec.intensity_scale);
    for (float& x : out.data) x *= inv;
    return out;
  };
  const auto train_names = suite.names_with_role(kRoleTrain);
  std::map<std::string, std::vector<std::vector<double>>> train_features;
  for (const auto& tn : train_names) {
    const auto& te = suite.at(tn);
    train_features[tn] = metrics::patch_features(normalized(te.recon), te.labels, spec.frechet);
  }
  for (auto& [name, entry] : suite.datasets) {
    const auto feats = metrics::patch_features(normalized(entry.recon), entry.labels, spec.frechet);
    for (const auto& tn : train_names) {
      entry.fid_vs_train[tn] = metrics::frechet_distance(feats, train_features[tn]);
    }
  }
  return suite;
}

void save_suite(const DatasetSuite& suite, const std::string& dir) {
  fs::create_directories(dir);
  nlohmann::json meta;
  meta["spec"] = suite.spec;
  nlohmann::json table = nlohmann::json::object();
  for (const auto& [name, e] : suite.datasets) {
    const std::string base = dir + "/" + name;
    nlohmann::json side;
    side["seed"] = e.spec.phantom.seed;
    side["spec"] = nlohmann::json{{"phantom", e.spec.phantom}, {"scan", e.spec.scan}};
    save_volume(e.recon, base + "_recon", &side);
    save_labels(e.labels, base + "_labels", &side);
    table[name] = {{"role", e.spec.role},
                   {"pore_density", e.pore_density},
                   {"inclusion_density", e.inclusion_density},
                   {"fid_vs_train", e.fid_vs_train}};
  }
  meta["datasets"] = table;
  std::ofstream f(dir + "/suite.json");
  if (!f) throw ConfigError("cannot write " + dir + "/suite.json");
  f << meta.dump(2) << "\n";
}

DatasetSuite load_suite(const std::string& dir) {
  std::ifstream f(dir + "/suite.json");
  if (!f) throw ConfigError("missing " + dir + "/suite.json");
  nlohmann::json meta;
  f >> meta;
  DatasetSuite suite;
  suite.spec = meta.at("spec").get<SuiteSpec>();
  for (const auto& d : suite.spec.datasets) {
    DatasetEntry e;
    e.spec = d;
    e.recon = load_volume(dir + "/" + d.name + "_recon");
    e.labels = load_labels(dir + "/" + d.name + "_labels");
    const auto& row = meta.at("datasets").at(d.name);
    e.pore_density = row.at("pore_density").get<double>();
    e.inclusion_density = row.at("inclusion_density").get<double>();
    e.fid_vs_train = row.at("fid_vs_train").get<std::map<std::string, double>>();
    suite.datasets.emplace(d.name, std::move(e));
  }
  return suite;
}

namespace {

// concatenated defect-biased patch datasets over the named training volumes
segnet::SliceDataset gather_patch_dataset(const DatasetSuite& suite,
                                          const std::vector<std::string>& names, int window,
                                          int patch, int per_volume, double scale, uint64_t seed,
                                          double defect_fraction) {
  segnet::SliceDataset all;
  uint64_t k = 0;
  for (const auto& n : names) {
    const auto& e = suite.at(n);
    auto ds = segnet::make_patch_dataset(e.recon, e.labels, window, patch, per_volume, scale,
                                         mix_seed(seed, k++), defect_fraction);
    if (all.samples.empty()) {
      all = std::move(ds);
    } else {
      if (ds.height != all.height || ds.width != all.width) {
        throw ShapeError("train: datasets have mismatched patch shapes");
      }
      for (auto& s : ds.samples) all.samples.push_back(std::move(s));
    }
  }
  return all;
}

adapter::BinaryDataset gather_binary_dataset(const DatasetSuite& suite,
                                             const std::vector<std::string>& names, VoxClass cls,
                                             double scale) {
  adapter::BinaryDataset all;
  for (const auto& n : names) {
    const auto& e = suite.at(n);
    auto ds = adapter::make_binary_dataset(e.recon, e.labels, cls, scale);
    if (all.samples.empty()) {
      all = std::move(ds);
    } else {
      for (auto& s : ds.samples) all.samples.push_back(std::move(s));
    }
  }
  return all;
}

bool dataset_has_positives(const adapter::BinaryDataset& ds) {
  for (const auto& s : ds.samples) {
    for (uint8_t v : s.mask) {
      if (v) return true;
    }
  }
  return false;
}

}  // namespace

TrainedModels train_class_models(const DatasetSuite& suite, const TrainOptions& opt) {
  TrainedModels out;
  out.method = opt.method;
  out.provenance["train_datasets"] = opt.train_datasets;
  out.provenance["seed"] = opt.seed;

  if (opt.method == "baseline_unet") {
    auto ds = gather_patch_dataset(suite, opt.train_datasets, opt.unet.in_channels,
                                   opt.unet_patch, opt.unet_patches_per_volume,
                                   suite.spec.intensity_scale, opt.seed,
                                   opt.unet_defect_fraction);
    segnet::UNet25Config cfg = opt.unet;
    cfg.patch_size = opt.unet_patch;
    auto params = segnet::build_unet25(cfg, opt.seed);
    auto res = segnet::train(cfg, std::move(params), ds, opt.unet_train);
    out.has_baseline = true;
    out.unet_cfg = cfg;
    out.unet_params = std::move(res.params);
    out.provenance["best_val_dice"] = res.best_val_dice;
    out.provenance["best_epoch"] = res.best_epoch;
    out.provenance["epochs_run"] = res.history.size();
    out.provenance["class_weights"] = res.class_weights;
    out.provenance["history_csv"] = segnet::history_csv(res.history);
  } else if (opt.method == "adapter") {
    auto backbone = adapter::make_pretrained_backbone(opt.backbone);
    out.has_adapter = true;
    out.backbone_cfg = opt.backbone;
    out.adapter_cfg = opt.adapter_cfg;
    for (const auto& [name, p] : backbone.params) {
      out.backbone_params.add(name, p.shape, p.data, false);
    }
    out.class_models.backbone_fingerprint = backbone.fingerprint;
    nlohmann::json skipped = nlohmann::json::array();
    for (VoxClass cls : opt.classes) {
      const std::string cname = vox_class_name(cls);
      auto ds = gather_binary_dataset(suite, opt.train_datasets, cls, suite.spec.intensity_scale);
      if (!dataset_has_positives(ds)) {
        skipped.push_back(cname);  // zero positive voxels: skip with warning
        continue;
      }
      adapter::AdapterConfig acfg = opt.adapter_cfg;
      acfg.seed = mix_seed(opt.seed, static_cast<uint64_t>(cls));
      auto model = adapter::build_adapter_model(backbone, acfg);
      adapter::FinetuneConfig fcfg = opt.finetune_cfg;
      fcfg.seed = mix_seed(opt.seed, 100 + static_cast<uint64_t>(cls));
      auto res = adapter::finetune(model, ds, fcfg);
      out.provenance["val_iou"][cname] = res.best_val_iou;
      out.class_models.models.emplace(cname, std::move(res.model));
    }
    out.provenance["skipped_classes"] = skipped;
  } else {
    throw ConfigError("train_class_models: unknown method " + opt.method);
  }
  return out;
}

LabelVolume aggregate_multiclass(const ClassProbs& probs, double threshold,
                                 const std::vector<VoxClass>& priority) {
  const std::vector<Image>* stacks[3] = {&probs.material, &probs.pore, &probs.inclusion};
  const size_t nz = probs.material.size();
  if (probs.pore.size() != nz || probs.inclusion.size() != nz || nz == 0) {
    throw ShapeError("aggregate_multiclass: class stacks differ in depth");
  }
  if (priority.size() != 3) throw ConfigError("aggregate_multiclass: priority must list 3 classes");
  for (VoxClass c : priority) {
    if (c == VoxClass::air) throw ConfigError("aggregate_multiclass: air cannot take priority");
  }
  const int ny = probs.material[0].ny, nx = probs.material[0].nx;
  for (const auto* st : stacks) {
    for (const auto& img : *st) {
      if (img.ny != ny || img.nx != nx) {
        throw ShapeError("aggregate_multiclass: probability map shapes differ");
      }
    }
  }
  const auto stack_for = [&](VoxClass c) -> const std::vector<Image>& {
    switch (c) {
      case VoxClass::material: return probs.material;
      case VoxClass::pore: return probs.pore;
      case VoxClass::inclusion: return probs.inclusion;
      default: throw ConfigError("aggregate_multiclass: bad class");
    }
  };

  LabelVolume out(static_cast<int>(nz), ny, nx);
  const size_t plane = static_cast<size_t>(ny) * nx;
  for (size_t z = 0; z < nz; ++z) {
    uint8_t* dst = out.classes.data() + z * plane;
    for (size_t i = 0; i < plane; ++i) {
      uint8_t cls = static_cast<uint8_t>(VoxClass::air);
      for (VoxClass c : priority) {
        if (stack_for(c)[z].data[i] >= threshold) {
          cls = static_cast<uint8_t>(c);
          break;
        }
      }
      dst[i] = cls;
    }
  }
  return out;
}

ClassProbs one_hot_probs(const LabelVolume& labels) {
  ClassProbs out;
  const int nz = labels.shape[0], ny = labels.shape[1], nx = labels.shape[2];
  const size_t plane = static_cast<size_t>(ny) * nx;
  for (int z = 0; z < nz; ++z) {
    Image m(ny, nx), p(ny, nx), inc(ny, nx);
    const uint8_t* lz = labels.classes.data() + static_cast<size_t>(z) * plane;
    for (size_t i = 0; i < plane; ++i) {
      m.data[i] = lz[i] == static_cast<uint8_t>(VoxClass::material) ? 1.0 : 0.0;
      p.data[i] = lz[i] == static_cast<uint8_t>(VoxClass::pore) ? 1.0 : 0.0;
      inc.data[i] = lz[i] == static_cast<uint8_t>(VoxClass::inclusion) ? 1.0 : 0.0;
    }
    out.material.push_back(std::move(m));
    out.pore.push_back(std::move(p));
    out.inclusion.push_back(std::move(inc));
  }
  return out;
}

LabelVolume predict_multiclass(const TrainedModels& models, const Volume& volume,
                               double intensity_scale, nlohmann::json* flags) {
  if (!models.has_adapter) throw ConfigError("predict_multiclass: no adapter models");
  ClassProbs probs;
  const int nz = volume.shape[0], ny = volume.shape[1], nx = volume.shape[2];
  const auto zero_stack = [&] {
    return std::vector<Image>(static_cast<size_t>(nz), Image(ny, nx, 0.0));
  };
  for (VoxClass cls : kSegClasses) {
    const std::string cname = vox_class_name(cls);
    std::vector<Image> stack;
    auto it = models.class_models.models.find(cname);
    if (it == models.class_models.models.end()) {
      stack = zero_stack();  // skipped class predicts nothing
      if (flags) (*flags)["missing_class_models"].push_back(cname);
    } else {
      stack = adapter::predict_volume_probs(it->second, volume, intensity_scale);
    }
    if (cls == VoxClass::material) probs.material = std::move(stack);
    else if (cls == VoxClass::pore) probs.pore = std::move(stack);
    else probs.inclusion = std::move(stack);
  }
  return aggregate_multiclass(probs);
}

namespace {

metrics::MetricsReport report_for(const LabelVolume& pred, const LabelVolume& truth, VoxClass cls,
                                  const std::string& dataset_id, const std::string& model_id) {
  metrics::MetricsReport r;
  r.dataset_id = dataset_id;
  r.model_id = model_id;
  r.class_name = vox_class_name(cls);
  r.layers = metrics::layer_metrics(pred, truth, cls);
  const auto pm = metrics::class_mask(pred, cls);
  const auto tm = metrics::class_mask(truth, cls);
  r.volume_iou = metrics::iou(pm, tm);
  r.volume_dice = metrics::dice(pm, tm);
  return r;
}

}  // namespace

ExperimentReport run_experiment(const DatasetSuite& suite, const TrainedModels& models,
                                const std::string& report_dir) {
  if (!models.has_baseline && !models.has_adapter) {
    throw ConfigError("run_experiment: no trained models supplied");
  }
  ExperimentReport out;
  nlohmann::json& summary = out.summary;
  summary["tool_version"] = kToolVersion;

  for (const auto& d : suite.spec.datasets) {
    const auto& e = suite.at(d.name);
    summary["datasets"][d.name] = {{"role", d.role},
                                   {"pore_density", e.pore_density},
                                   {"inclusion_density", e.inclusion_density},
                                   {"fid_vs_train", e.fid_vs_train}};
  }

  const double scale = suite.spec.intensity_scale;
  std::map<std::string, std::map<std::string, double>> pore_iou_by_model;  // model -> dataset -> iou

  for (const auto& d : suite.spec.datasets) {
    const auto& e = suite.at(d.name);
    if (models.has_baseline) {
      const auto pred = segnet::predict_volume(models.unet_cfg, models.unet_params, e.recon, scale);
      for (VoxClass cls : kSegClasses) {
        auto r = report_for(pred, e.labels, cls, d.name, "baseline_unet");
        if (cls == VoxClass::pore) pore_iou_by_model["baseline_unet"][d.name] = r.volume_iou;
        out.reports.push_back(std::move(r));
      }
    }
    if (models.has_adapter) {
      nlohmann::json flags;
      const auto pred = predict_multiclass(models, e.recon, scale, &flags);
      for (VoxClass cls : kSegClasses) {
        auto r = report_for(pred, e.labels, cls, d.name, "adapter");
        if (cls == VoxClass::pore) pore_iou_by_model["adapter"][d.name] = r.volume_iou;
        out.reports.push_back(std::move(r));
      }
      if (!flags.is_null()) summary["prediction_flags"][d.name] = flags;
    }
  }

  // Spearman of OoD score vs pore IoU over the test datasets
  std::string ref_train = "tr1";
  if (models.provenance.contains("train_datasets") &&
      !models.provenance["train_datasets"].empty()) {
    ref_train = models.provenance["train_datasets"][0].get<std::string>();
  }
  const auto tests = suite.test_names();
  for (const auto& [model_id, by_ds] : pore_iou_by_model) {
    std::vector<double> fid, piou;
    for (const auto& tn : tests) {
      const auto& e = suite.at(tn);
      auto it = e.fid_vs_train.find(ref_train);
      if (it == e.fid_vs_train.end() || !by_ds.count(tn)) continue;
      fid.push_back(it->second);
      piou.push_back(by_ds.at(tn));
    }
    if (fid.size() >= 2) {
      summary["spearman_pore_iou_vs_fid"][model_id] = {
          {"rho", metrics::spearman_rank_correlation(fid, piou)},
          {"n_datasets", fid.size()},
          {"reference_train", ref_train}};
    }
  }

  if (!report_dir.empty()) {
    fs::create_directories(report_dir);
    std::ofstream csv(report_dir + "/all_reports.csv");
    csv << "dataset_id,model_id,class,layer,precision,recall,f1,iou,included,pred_empty\n";
    for (const auto& r : out.reports) {
      const std::string path =
          report_dir + "/report_" + r.model_id + "_" + r.dataset_id + "_" + r.class_name + ".json";
      std::ofstream jf(path);
      jf << r.to_json().dump(2) << "\n";
      const std::string full = r.to_csv();
      csv << full.substr(full.find('\n') + 1);  // skip per-file header
    }
    std::ofstream sf(report_dir + "/summary.json");
    sf << summary.dump(2) << "\n";
  }
  return out;
}

std::vector<LabeledImage> make_fewshot_images(const phantom::PhantomSpec& ph,
                                              const tomo::ScanConfig& scan, int n) {
  if (n < 1) throw ConfigError("make_fewshot_images: n must be >= 1");
  if (n > ph.grid_shape[0]) {
    throw ConfigError("make_fewshot_images: n exceeds phantom depth");
  }
  auto gen = phantom::generate_phantom(ph);
  tomo::MuMap mu{ph.mu_material, ph.mu_inclusion};
  const Volume recon = tomo::simulate_scan(gen.labels, mu, scan);
  const int nz = ph.grid_shape[0];
  const int z0 = (nz - n) / 2;
  std::vector<LabeledImage> out;
  const size_t plane = static_cast<size_t>(ph.grid_shape[1]) * ph.grid_shape[2];
  for (int i = 0; i < n; ++i) {
    LabeledImage li;
    li.image = slice_image(recon, z0 + i);
    li.labels.assign(gen.labels.classes.begin() + static_cast<int64_t>(z0 + i) * plane,
                     gen.labels.classes.begin() + static_cast<int64_t>(z0 + i + 1) * plane);
    out.push_back(std::move(li));
  }
  return out;
}

namespace {

adapter::BinaryDataset fewshot_binary(const std::vector<LabeledImage>& few_shot, VoxClass cls,
                                      double scale) {
  adapter::BinaryDataset ds;
  if (few_shot.empty()) throw ConfigError("refinetune: empty few-shot set");
  ds.height = few_shot[0].image.ny;
  ds.width = few_shot[0].image.nx;
  for (const auto& li : few_shot) {
    adapter::BinarySample s;
    s.image.reserve(li.image.data.size());
    for (double v : li.image.data) s.image.push_back(v / scale);
    s.mask.resize(li.labels.size());
    for (size_t i = 0; i < li.labels.size(); ++i) {
      s.mask[i] = li.labels[i] == static_cast<uint8_t>(cls) ? 1 : 0;
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

double class_volume_iou(const adapter::AdapterModel& model, const Volume& vol,
                        const LabelVolume& labels, VoxClass cls, double scale,
                        double threshold) {
  const auto probs = adapter::predict_volume_probs(model, vol, scale);
  const size_t plane = static_cast<size_t>(vol.shape[1]) * vol.shape[2];
  int64_t inter = 0, uni = 0;
  for (int z = 0; z < vol.shape[0]; ++z) {
    const uint8_t* lz = labels.classes.data() + static_cast<size_t>(z) * plane;
    const auto& img = probs[static_cast<size_t>(z)];
    for (size_t i = 0; i < plane; ++i) {
      const bool p = img.data[i] >= threshold;
      const bool g = lz[i] == static_cast<uint8_t>(cls);
      if (p && g) ++inter;
      if (p || g) ++uni;
    }
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

ForgettingReport refinetune_and_compare(const DatasetSuite& suite, const TrainedModels& base,
                                        const std::vector<LabeledImage>& few_shot,
                                        const adapter::FinetuneConfig& refit_cfg,
                                        const std::vector<std::string>& target_group,
                                        const std::vector<std::string>& ind_group) {
  if (!base.has_adapter) throw ConfigError("refinetune: base models must be the adapter route");
  if (few_shot.empty()) throw ConfigError("refinetune: empty few-shot set");

  const double scale = suite.spec.intensity_scale;
  ForgettingReport rep;
  rep.few_shot_count = static_cast<int>(few_shot.size());
  rep.target_group = target_group;
  rep.ind_group = ind_group;

  // re-fine-tune each class model on the few-shot images
  std::map<std::string, adapter::AdapterModel> refined;
  for (const auto& [cname, model] : base.class_models.models) {
    const VoxClass cls = vox_class_from_name(cname);
    auto ds = fewshot_binary(few_shot, cls, scale);
    bool has_pos = false;
    for (const auto& s : ds.samples) {
      for (uint8_t v : s.mask) {
        if (v) {
          has_pos = true;
          break;
        }
      }
      if (has_pos) break;
    }
    if (!has_pos) {
      refined.emplace(cname, model);  // nothing to refit on; keep the base model
      continue;
    }
    auto res = adapter::finetune(model, ds, refit_cfg);
    if (res.model.backbone_fingerprint != base.class_models.backbone_fingerprint ||
        res.model.params.fingerprint(true) != model.params.fingerprint(true)) {
      throw NumericError("refinetune: frozen backbone changed during re-fine-tuning");
    }
    refined.emplace(cname, std::move(res.model));
  }

  // evaluate base and refined on every suite dataset
  std::vector<double> deltas_target, deltas_ind;
  for (const auto& d : suite.spec.datasets) {
    const auto& e = suite.at(d.name);
    for (const auto& [cname, model] : base.class_models.models) {
      const VoxClass cls = vox_class_from_name(cname);
      ForgettingEntry fe;
      fe.dataset = d.name;
      fe.class_name = cname;
      fe.base_iou = class_volume_iou(model, e.recon, e.labels, cls, scale, refit_cfg.threshold);
      fe.refined_iou = class_volume_iou(refined.at(cname), e.recon, e.labels, cls, scale,
                                        refit_cfg.threshold);
      fe.delta = fe.refined_iou - fe.base_iou;
      if (std::find(target_group.begin(), target_group.end(), d.name) != target_group.end()) {
        deltas_target.push_back(fe.delta);
      }
      if (std::find(ind_group.begin(), ind_group.end(), d.name) != ind_group.end()) {
        deltas_ind.push_back(fe.delta);
      }
      rep.entries.push_back(std::move(fe));
    }
  }
  const auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  rep.mean_delta_target = mean(deltas_target);
  rep.mean_delta_ind = mean(deltas_ind);
  return rep;
}

nlohmann::json ForgettingReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : entries) {
    rows.push_back({{"dataset", e.dataset},
                    {"class", e.class_name},
                    {"base_iou", e.base_iou},
                    {"refined_iou", e.refined_iou},
                    {"delta", e.delta}});
  }
  return nlohmann::json{{"few_shot_count", few_shot_count},
                        {"entries", rows},
                        {"target_group", target_group},
                        {"ind_group", ind_group},
                        {"mean_delta_target", mean_delta_target},
                        {"mean_delta_ind", mean_delta_ind}};
}

void save_models(const TrainedModels& models, const std::string& dir) {
  fs::create_directories(dir);
  nlohmann::json meta;
  meta["method"] = models.method;
  meta["provenance"] = models.provenance;
  if (models.has_baseline) {
    meta["unet"] = {{"in_channels", models.unet_cfg.in_channels},
                    {"base_width", models.unet_cfg.base_width},
                    {"depth", models.unet_cfg.depth},
                    {"n_classes", models.unet_cfg.n_classes},
                    {"patch_size", models.unet_cfg.patch_size}};
    diff::save_checkpoint(models.unet_params, dir + "/baseline_unet.ckpt", "baseline_unet", 0);
  }
  if (models.has_adapter) {
    meta["backbone"] = models.backbone_cfg;
    meta["adapter"] = models.adapter_cfg;
    diff::save_checkpoint(models.backbone_params, dir + "/backbone.ckpt", "backbone", 0);
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& [cname, model] : models.class_models.models) {
      classes.push_back(cname);
      adapter::save_adapter_checkpoint(model, dir + "/adapter_" + cname + ".ckpt",
                                       "adapter_" + cname, 0);
    }
    meta["classes"] = classes;
  }
  std::ofstream f(dir + "/models.json");
  if (!f) throw ConfigError("cannot write " + dir + "/models.json");
  f << meta.dump(2) << "\n";
}

TrainedModels load_models(const std::string& dir) {
  std::ifstream f(dir + "/models.json");
  if (!f) throw ConfigError("missing " + dir + "/models.json");
  nlohmann::json meta;
  f >> meta;
  TrainedModels out;
  out.method = meta.at("method").get<std::string>();
  out.provenance = meta.value("provenance", nlohmann::json::object());
  if (meta.contains("unet")) {
    out.has_baseline = true;
    const auto& u = meta["unet"];
    out.unet_cfg.in_channels = u.at("in_channels").get<int>();
    out.unet_cfg.base_width = u.at("base_width").get<int>();
    out.unet_cfg.depth = u.at("depth").get<int>();
    out.unet_cfg.n_classes = u.at("n_classes").get<int>();
    out.unet_cfg.patch_size = u.at("patch_size").get<int>();
    out.unet_params = diff::load_checkpoint(dir + "/baseline_unet.ckpt");
  }
  if (meta.contains("backbone")) {
    out.has_adapter = true;
    out.backbone_cfg = meta.at("backbone").get<adapter::BackboneConfig>();
    out.adapter_cfg = meta.at("adapter").get<adapter::AdapterConfig>();
    out.backbone_params = diff::load_checkpoint(dir + "/backbone.ckpt");
    adapter::FrozenBackbone bb;
    bb.cfg = out.backbone_cfg;
    for (const auto& [name, p] : out.backbone_params) bb.params.add(name, p.shape, p.data, false);
    bb.fingerprint = bb.params.fingerprint(true);
    out.class_models.backbone_fingerprint = bb.fingerprint;
    for (const auto& cj : meta.at("classes")) {
      const std::string cname = cj.get<std::string>();
      auto model = adapter::build_adapter_model(bb, out.adapter_cfg);
      adapter::load_adapter_checkpoint(model, dir + "/adapter_" + cname + ".ckpt");
      out.class_models.models.emplace(cname, std::move(model));
    }
  }
  return out;
}

void write_manifest(const std::string& dir, const std::string& command,
                    const nlohmann::json& config, const std::vector<uint64_t>& seeds) {
  fs::create_directories(dir);
  nlohmann::json m;
  m["command"] = command;
  const std::string cfg_str = config.dump();
  m["config_hash"] = fnv1a64(cfg_str);
  m["seeds"] = seeds;
  m["tool_version"] = kToolVersion;
  std::ofstream f(dir + "/manifest.json");
  if (!f) throw ConfigError("cannot write " + dir + "/manifest.json");
  f << m.dump(2) << "\n";
}

}  // namespace xct::pipeline

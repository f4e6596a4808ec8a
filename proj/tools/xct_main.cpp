// Command-line front end for the XCT inspection workbench: synthetic dataset
// generation, scan simulation, model training, few-shot re-fine-tuning,
// evaluation, and report aggregation.
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "xct/pipeline.hpp"

namespace fs = std::filesystem;
namespace pl = xct::pipeline;
using nlohmann::json;

namespace {

json load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw xct::ConfigError("cannot read config file: " + path);
  json j;
  f >> j;
  return j;
}

int run_generate(const std::string& config_path, const std::string& out, uint64_t seed) {
  pl::SuiteSpec spec;
  json cfg;
  if (config_path.empty()) {
    spec = pl::SuiteSpec::desk_default(seed);
    cfg = spec;
  } else {
    cfg = load_json(config_path);
    spec = cfg.get<pl::SuiteSpec>();
  }
  const auto suite = pl::build_suite(spec);
  pl::save_suite(suite, out);
  std::vector<uint64_t> seeds;
  for (const auto& d : spec.datasets) {
    seeds.push_back(d.phantom.seed);
    seeds.push_back(d.scan.seed);
  }
  pl::write_manifest(out, "generate", cfg, seeds);
  std::cout << "suite with " << suite.datasets.size() << " datasets written to " << out << "\n";
  for (const auto& d : spec.datasets) {
    const auto& e = suite.at(d.name);
    std::cout << "  " << d.name << " (" << d.role << "): pores " << e.pore_density
              << ", inclusions " << e.inclusion_density;
    for (const auto& [tn, fid] : e.fid_vs_train) std::cout << ", fid_vs_" << tn << " " << fid;
    std::cout << "\n";
  }
  return 0;
}

int run_scan(const std::string& labels_path, const std::string& config_path,
             const std::string& out, double mu_material, double mu_inclusion) {
  const auto labels = xct::load_labels(labels_path);
  json cfg = load_json(config_path);
  const auto scan = cfg.get<xct::tomo::ScanConfig>();
  const auto vol = xct::tomo::simulate_scan(labels, {mu_material, mu_inclusion}, scan);
  json meta;
  meta["seed"] = scan.seed;
  meta["spec"] = {{"scan", scan}};
  xct::save_volume(vol, out, &meta);
  pl::write_manifest(fs::path(out).parent_path().string(), "scan", cfg, {scan.seed});
  std::cout << "reconstruction written to " << out << ".raw\n";
  return 0;
}

int run_train(const std::string& suite_dir, const std::string& method, const std::string& out,
              int epochs, uint64_t seed, const std::vector<std::string>& train_datasets) {
  const auto suite = pl::load_suite(suite_dir);
  pl::TrainOptions opt;
  opt.method = method;
  opt.seed = seed;
  if (!train_datasets.empty()) opt.train_datasets = train_datasets;
  if (epochs > 0) {
    opt.unet_train.max_epochs = epochs;
    opt.finetune_cfg.epochs = epochs;
  }
  const auto models = pl::train_class_models(suite, opt);
  pl::save_models(models, out);
  json cfg = {{"method", method}, {"epochs", epochs}, {"train_datasets", opt.train_datasets}};
  pl::write_manifest(out, "train", cfg, {seed});
  std::cout << "trained " << method << " models written to " << out << "\n";
  if (models.provenance.contains("val_iou")) {
    for (const auto& [cls, v] : models.provenance["val_iou"].items()) {
      std::cout << "  " << cls << ": best val IoU " << v.get<double>() << "\n";
    }
  }
  return 0;
}

int run_finetune(const std::string& suite_dir, const std::string& models_dir,
                 const std::string& regime, int few_shot, int epochs, uint64_t seed,
                 const std::string& out) {
  const auto suite = pl::load_suite(suite_dir);
  const auto base = pl::load_models(models_dir);

  const auto& regime_entry = suite.at(regime);
  auto ph = regime_entry.spec.phantom;
  ph.seed = xct::mix_seed(seed, 0xfee1);
  auto scan = regime_entry.spec.scan;
  scan.seed = xct::mix_seed(seed, 0xfee2);
  const auto few = pl::make_fewshot_images(ph, scan, few_shot);

  xct::adapter::FinetuneConfig refit;
  refit.epochs = epochs > 0 ? epochs : 30;
  refit.seed = seed;
  const auto target_group = std::vector<std::string>{regime};
  const auto ind_group = suite.names_with_role(pl::kRoleTestInd);
  const auto rep = pl::refinetune_and_compare(suite, base, few, refit, target_group, ind_group);

  fs::create_directories(out);
  const std::string path = out + "/forgetting_" + std::to_string(few_shot) + ".json";
  std::ofstream f(path);
  f << rep.to_json().dump(2) << "\n";
  json cfg = {{"regime", regime}, {"few_shot", few_shot}, {"epochs", refit.epochs}};
  pl::write_manifest(out, "finetune", cfg, {seed});
  std::cout << "forgetting report written to " << path << "\n";
  std::cout << "  mean delta (target OoD): " << rep.mean_delta_target << "\n";
  std::cout << "  mean delta (original InD): " << rep.mean_delta_ind << "\n";
  return 0;
}

int run_evaluate(const std::string& suite_dir, const std::string& models_dir,
                 const std::string& out) {
  const auto suite = pl::load_suite(suite_dir);
  const auto models = pl::load_models(models_dir);
  const auto rep = pl::run_experiment(suite, models, out);
  pl::write_manifest(out, "evaluate", json{{"suite", suite_dir}, {"models", models_dir}}, {});
  std::cout << rep.reports.size() << " reports written to " << out << "\n";
  if (rep.summary.contains("spearman_pore_iou_vs_fid")) {
    for (const auto& [model, row] : rep.summary["spearman_pore_iou_vs_fid"].items()) {
      std::cout << "  " << model << ": Spearman(pore IoU vs OoD score) = "
                << row.at("rho").get<double>() << " over " << row.at("n_datasets").get<size_t>()
                << " test sets\n";
    }
  }
  return 0;
}

int run_report(const std::string& reports_dir, const std::string& out) {
  fs::create_directories(out);
  json all = json::array();
  std::ofstream csv(out + "/combined.csv");
  csv << "dataset_id,model_id,class,mean_precision,std_precision,mean_recall,std_recall,"
         "mean_f1,std_f1,mean_iou,std_iou,volume_iou,volume_dice,n_layers,n_included\n";
  size_t count = 0;
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(reports_dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("report_", 0) == 0 && entry.path().extension() == ".json") {
      paths.push_back(entry.path());
    }
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    const auto j = load_json(p.string());
    all.push_back(j);
    csv << j.at("dataset_id").get<std::string>() << "," << j.at("model_id").get<std::string>()
        << "," << j.at("class").get<std::string>() << "," << j.at("mean").at("precision") << ","
        << j.at("std").at("precision") << "," << j.at("mean").at("recall") << ","
        << j.at("std").at("recall") << "," << j.at("mean").at("f1") << ","
        << j.at("std").at("f1") << "," << j.at("mean").at("iou") << "," << j.at("std").at("iou")
        << "," << j.at("volume_iou") << "," << j.at("volume_dice") << "," << j.at("n_layers")
        << "," << j.at("n_included") << "\n";
    ++count;
  }
  std::ofstream jf(out + "/combined.json");
  jf << all.dump(2) << "\n";

  // plot data: OoD score vs per-class volume IoU, when the summary is present
  const std::string summary_path = reports_dir + "/summary.json";
  if (fs::exists(summary_path)) {
    const auto summary = load_json(summary_path);
    std::ofstream pf(out + "/plotdata_fid_vs_iou.csv");
    pf << "dataset,model,class,fid_vs_tr1,volume_iou\n";
    for (const auto& j : all) {
      const auto ds = j.at("dataset_id").get<std::string>();
      if (!summary.at("datasets").contains(ds)) continue;
      const auto& row = summary.at("datasets").at(ds);
      if (!row.at("fid_vs_train").contains("tr1")) continue;
      pf << ds << "," << j.at("model_id").get<std::string>() << ","
         << j.at("class").get<std::string>() << "," << row.at("fid_vs_train").at("tr1") << ","
         << j.at("volume_iou") << "\n";
    }
  }
  pl::write_manifest(out, "report", json{{"reports", reports_dir}}, {});
  std::cout << "aggregated " << count << " reports into " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale XCT inspection workbench"};
  app.require_subcommand(1);

  std::string config, out, labels, suite_dir, models_dir, reports_dir, regime = "te_noisyreg";
  std::string method = "adapter";
  std::vector<std::string> train_datasets;
  uint64_t seed = 42;
  int epochs = 0, few_shot = 9;
  double mu_material = 0.02, mu_inclusion = 0.04;

  auto* gen = app.add_subcommand("generate", "Build a dataset suite (phantoms + simulated scans)");
  gen->add_option("--config", config, "suite spec JSON (defaults to the built-in desk suite)");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--seed", seed, "base seed for the default suite");

  auto* scan = app.add_subcommand("scan", "Simulate an acquisition of an existing label volume");
  scan->add_option("--labels", labels, "label volume path base (without .raw)")->required();
  scan->add_option("--config", config, "scan config JSON")->required();
  scan->add_option("--out", out, "output volume path base")->required();
  scan->add_option("--mu-material", mu_material, "material attenuation");
  scan->add_option("--mu-inclusion", mu_inclusion, "inclusion attenuation");

  auto* train = app.add_subcommand("train", "Train segmentation models on a suite");
  train->add_option("--suite", suite_dir, "suite directory")->required();
  train->add_option("--method", method, "baseline_unet | adapter")->required();
  train->add_option("--out", out, "output model directory")->required();
  train->add_option("--epochs", epochs, "override the training epoch budget");
  train->add_option("--seed", seed, "training seed");
  train->add_option("--train-datasets", train_datasets, "dataset names to train on");

  auto* fine = app.add_subcommand("finetune", "Few-shot re-fine-tuning + forgetting report");
  fine->add_option("--suite", suite_dir, "suite directory")->required();
  fine->add_option("--models", models_dir, "base (adapter) model directory")->required();
  fine->add_option("--regime", regime, "suite dataset naming the few-shot regime");
  fine->add_option("--few-shot", few_shot, "number of few-shot images");
  fine->add_option("--epochs", epochs, "re-fine-tuning epochs (default 30)");
  fine->add_option("--seed", seed, "few-shot sampling seed");
  fine->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("evaluate", "Evaluate trained models across the suite");
  eval->add_option("--suite", suite_dir, "suite directory")->required();
  eval->add_option("--models", models_dir, "model directory")->required();
  eval->add_option("--out", out, "report directory")->required();

  auto* rept = app.add_subcommand("report", "Aggregate report JSONs into CSV + plot data");
  rept->add_option("--reports", reports_dir, "directory with report_*.json")->required();
  rept->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return run_generate(config, out, seed);
    if (scan->parsed()) return run_scan(labels, config, out, mu_material, mu_inclusion);
    if (train->parsed()) return run_train(suite_dir, method, out, epochs, seed, train_datasets);
    if (fine->parsed()) {
      return run_finetune(suite_dir, models_dir, regime, few_shot, epochs, seed, out);
    }
    if (eval->parsed()) return run_evaluate(suite_dir, models_dir, out);
    if (rept->parsed()) return run_report(reports_dir, out);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad usage is a config error
  } catch (const xct::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

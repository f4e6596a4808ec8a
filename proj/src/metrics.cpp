#include "xct/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "xct/common.hpp"
#include "xct/fft.hpp"

namespace xct::metrics {

Mask class_mask(const LabelVolume& labels, VoxClass cls) {
  Mask m(labels.classes.size());
  for (size_t i = 0; i < m.size(); ++i) {
    m[i] = labels.classes[i] == static_cast<uint8_t>(cls) ? 1 : 0;
  }
  return m;
}

ConfusionCounts confusion_counts(const Mask& pred, const Mask& truth) {
  if (pred.size() != truth.size()) {
    throw ShapeError("confusion_counts: mask sizes " + std::to_string(pred.size()) + " vs " +
                     std::to_string(truth.size()));
  }
  ConfusionCounts c;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    if (p && t) ++c.tp;
    else if (p && !t) ++c.fp;
    else if (!p && t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double iou(const Mask& pred, const Mask& truth) {
  const auto c = confusion_counts(pred, truth);
  const int64_t uni = c.tp + c.fp + c.fn;
  if (uni == 0) return 1.0;  // both empty: perfect agreement
  return static_cast<double>(c.tp) / static_cast<double>(uni);
}

double dice(const Mask& pred, const Mask& truth) {
  const auto c = confusion_counts(pred, truth);
  const int64_t den = 2 * c.tp + c.fp + c.fn;
  if (den == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

namespace {

struct MeanStd {
  double mean = 0.0, std = 0.0;
};

MeanStd mean_population_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(v.size()));
  return r;
}

}  // namespace

LayerMetrics layer_metrics(const LabelVolume& pred, const LabelVolume& truth, VoxClass cls) {
  if (pred.shape != truth.shape) {
    throw ShapeError("layer_metrics: volume shapes differ");
  }
  if (static_cast<int>(cls) < 0 || static_cast<int>(cls) >= kNumClasses) {
    throw ConfigError("layer_metrics: unknown class id");
  }
  const int nz = pred.shape[0];
  if (nz < 1) throw ConfigError("layer_metrics: need at least one layer");
  const size_t plane = static_cast<size_t>(pred.shape[1]) * pred.shape[2];
  const uint8_t c8 = static_cast<uint8_t>(cls);

  LayerMetrics lm;
  lm.n_layers = nz;
  std::vector<double> ps, rs, f1s, ious;
  for (int z = 0; z < nz; ++z) {
    const uint8_t* pz = pred.classes.data() + static_cast<size_t>(z) * plane;
    const uint8_t* tz = truth.classes.data() + static_cast<size_t>(z) * plane;
    LayerEntry e;
    e.z = z;
    for (size_t i = 0; i < plane; ++i) {
      const bool p = pz[i] == c8, t = tz[i] == c8;
      if (p && t) ++e.tp;
      else if (p && !t) ++e.fp;
      else if (!p && t) ++e.fn;
      else ++e.tn;
    }
    e.pred_empty = (e.tp + e.fp) == 0;
    const int64_t uni = e.tp + e.fp + e.fn;
    if (uni == 0) {
      e.included = false;  // degenerate layer: class absent in truth and prediction
    } else {
      e.precision = (e.tp + e.fp) > 0
                        ? static_cast<double>(e.tp) / static_cast<double>(e.tp + e.fp)
                        : 0.0;
      e.recall = (e.tp + e.fn) > 0
                     ? static_cast<double>(e.tp) / static_cast<double>(e.tp + e.fn)
                     : 0.0;
      e.f1 = (e.precision + e.recall) > 0.0
                 ? 2.0 * e.precision * e.recall / (e.precision + e.recall)
                 : 0.0;
      e.iou = static_cast<double>(e.tp) / static_cast<double>(uni);
      ps.push_back(e.precision);
      rs.push_back(e.recall);
      f1s.push_back(e.f1);
      ious.push_back(e.iou);
    }
    lm.layers.push_back(e);
  }
  lm.n_included = static_cast<int>(ps.size());
  const auto mp = mean_population_std(ps);
  const auto mr = mean_population_std(rs);
  const auto mf = mean_population_std(f1s);
  const auto mi = mean_population_std(ious);
  lm.mean_precision = mp.mean;
  lm.std_precision = mp.std;
  lm.mean_recall = mr.mean;
  lm.std_recall = mr.std;
  lm.mean_f1 = mf.mean;
  lm.std_f1 = mf.std;
  lm.mean_iou = mi.mean;
  lm.std_iou = mi.std;
  return lm;
}

namespace {

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) ev[i] = ev[i] > 0.0 ? std::sqrt(ev[i]) : 0.0;
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const std::vector<std::vector<double>>& features_a,
                        const std::vector<std::vector<double>>& features_b) {
  if (features_a.size() < 2 || features_b.size() < 2) {
    throw ConfigError("frechet_distance: need at least 2 feature vectors per set");
  }
  const size_t d = features_a[0].size();
  for (const auto& set : {&features_a, &features_b}) {
    for (const auto& v : *set) {
      if (v.size() != d) {
        throw ShapeError("frechet_distance: feature dimension " + std::to_string(v.size()) +
                         " vs " + std::to_string(d));
      }
    }
  }
  const auto moments = [d](const std::vector<std::vector<double>>& set) {
    const auto n = static_cast<Eigen::Index>(set.size());
    Eigen::MatrixXd x(n, static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(d); ++j) {
        x(i, j) = set[static_cast<size_t>(i)][static_cast<size_t>(j)];
      }
    }
    Eigen::VectorXd mu = x.colwise().mean();
    Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
    Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
    cov += 1e-6 * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d),
                                            static_cast<Eigen::Index>(d));
    return std::make_pair(mu, cov);
  };
  const auto [mu1, c1] = moments(features_a);
  const auto [mu2, c2] = moments(features_b);

  const Eigen::MatrixXd a = sqrt_psd(c1);
  Eigen::MatrixXd inner = a * c2 * a;
  inner = 0.5 * (inner + inner.transpose());  // symmetrize covariance noise
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner);
  double tr_sqrt = 0.0;
  for (int i = 0; i < es.eigenvalues().size(); ++i) {
    const double ev = es.eigenvalues()[i];
    if (ev > 0.0) tr_sqrt += std::sqrt(ev);
  }
  const double dist = (mu1 - mu2).squaredNorm() + c1.trace() + c2.trace() - 2.0 * tr_sqrt;
  return dist;
}

std::vector<double> patch_descriptor(const Image& crop) {
  const int n = crop.ny;
  std::vector<double> f(8, 0.0);
  const double npix = static_cast<double>(crop.data.size());
  double mean = 0.0;
  for (double v : crop.data) mean += v;
  mean /= npix;
  double var = 0.0;
  for (double v : crop.data) var += (v - mean) * (v - mean);
  var /= npix;
  f[0] = mean;
  f[1] = std::sqrt(var);

  // gradient magnitude by central differences over the interior
  double gsum = 0.0, gsq = 0.0;
  int64_t gcount = 0;
  for (int y = 1; y < crop.ny - 1; ++y) {
    for (int x = 1; x < crop.nx - 1; ++x) {
      const double gx = 0.5 * (crop.at(y, x + 1) - crop.at(y, x - 1));
      const double gy = 0.5 * (crop.at(y + 1, x) - crop.at(y - 1, x));
      const double g = std::sqrt(gx * gx + gy * gy);
      gsum += g;
      gsq += g * g;
      ++gcount;
    }
  }
  if (gcount > 0) {
    f[2] = gsum / static_cast<double>(gcount);
    const double gvar = gsq / static_cast<double>(gcount) - f[2] * f[2];
    f[3] = gvar > 0.0 ? std::sqrt(gvar) : 0.0;
  }

  // spectral rms in 4 radial high-pass bands (zero-mean, Hann-windowed, padded)
  const size_t m = next_pow2(static_cast<size_t>(n));
  std::vector<std::vector<std::complex<double>>> rows(
      m, std::vector<std::complex<double>>(m, 0.0));
  for (int y = 0; y < crop.ny; ++y) {
    const double wy = 0.5 * (1.0 - std::cos(2.0 * M_PI * y / (crop.ny - 1)));
    for (int x = 0; x < crop.nx; ++x) {
      const double wx = 0.5 * (1.0 - std::cos(2.0 * M_PI * x / (crop.nx - 1)));
      rows[y][x] = (crop.at(y, x) - mean) * wy * wx;
    }
  }
  for (size_t y = 0; y < m; ++y) fft_inplace(rows[y], false);
  std::vector<std::complex<double>> col(m);
  for (size_t x = 0; x < m; ++x) {
    for (size_t y = 0; y < m; ++y) col[y] = rows[y][x];
    fft_inplace(col, false);
    for (size_t y = 0; y < m; ++y) rows[y][x] = col[y];
  }
  const double bands[5] = {0.0625, 0.125, 0.25, 0.375, 0.5};
  double energy[4] = {0, 0, 0, 0};
  for (size_t y = 0; y < m; ++y) {
    const double ny_ = (y <= m / 2 ? static_cast<double>(y) : static_cast<double>(m) - y) /
                       static_cast<double>(m);
    for (size_t x = 0; x < m; ++x) {
      const double nx_ = (x <= m / 2 ? static_cast<double>(x) : static_cast<double>(m) - x) /
                         static_cast<double>(m);
      const double nu = std::sqrt(nx_ * nx_ + ny_ * ny_);
      for (int b = 0; b < 4; ++b) {
        if (nu > bands[b] && nu <= bands[b + 1]) {
          energy[b] += std::norm(rows[y][x]);
          break;
        }
      }
    }
  }
  for (int b = 0; b < 4; ++b) f[4 + b] = std::sqrt(energy[b]) / npix;
  return f;
}

namespace {

// all top-left positions whose crop window lies fully inside the foreground
std::vector<std::pair<int, int>> valid_crop_origins(const Mask& fg, int ny, int nx, int crop) {
  std::vector<std::pair<int, int>> out;
  if (crop > ny || crop > nx) return out;
  // summed-area table over the mask
  std::vector<int64_t> sat(static_cast<size_t>(ny + 1) * (nx + 1), 0);
  for (int y = 0; y < ny; ++y) {
    for (int x = 0; x < nx; ++x) {
      sat[(y + 1) * static_cast<size_t>(nx + 1) + (x + 1)] =
          (fg[static_cast<size_t>(y) * nx + x] ? 1 : 0) +
          sat[static_cast<size_t>(y) * (nx + 1) + (x + 1)] +
          sat[(y + 1) * static_cast<size_t>(nx + 1) + x] -
          sat[static_cast<size_t>(y) * (nx + 1) + x];
    }
  }
  const int64_t full = static_cast<int64_t>(crop) * crop;
  for (int y = 0; y + crop <= ny; ++y) {
    for (int x = 0; x + crop <= nx; ++x) {
      const int64_t s = sat[(y + crop) * static_cast<size_t>(nx + 1) + (x + crop)] -
                        sat[static_cast<size_t>(y) * (nx + 1) + (x + crop)] -
                        sat[(y + crop) * static_cast<size_t>(nx + 1) + x] +
                        sat[static_cast<size_t>(y) * (nx + 1) + x];
      if (s == full) out.emplace_back(y, x);
    }
  }
  return out;
}

Image extract_crop(const Image& img, int oy, int ox, int crop) {
  Image c(crop, crop);
  for (int y = 0; y < crop; ++y) {
    for (int x = 0; x < crop; ++x) c.at(y, x) = img.at(oy + y, ox + x);
  }
  return c;
}

}  // namespace

std::vector<std::vector<double>> patch_features(const Image& image, const Mask& foreground,
                                                const FrechetConfig& cfg) {
  if (foreground.size() != image.data.size()) {
    throw ShapeError("patch_features: mask size does not match image");
  }
  if (cfg.n_crops < 1) throw ConfigError("patch_features: n_crops must be >= 1");
  const auto origins = valid_crop_origins(foreground, image.ny, image.nx, cfg.crop_size);
  if (origins.empty()) {
    throw ConfigError("patch_features: foreground too small for crop_size " +
                      std::to_string(cfg.crop_size));
  }
  Rng rng(cfg.seed);
  std::vector<std::vector<double>> out;
  for (int i = 0; i < cfg.n_crops; ++i) {
    const auto [oy, ox] = origins[rng.uniform_index(origins.size())];
    out.push_back(patch_descriptor(extract_crop(image, oy, ox, cfg.crop_size)));
  }
  return out;
}

std::vector<std::vector<double>> patch_features(const Volume& volume, const LabelVolume& labels,
                                                const FrechetConfig& cfg) {
  if (volume.shape != labels.shape) throw ShapeError("patch_features: volume/labels shapes differ");
  if (cfg.n_crops < 1) throw ConfigError("patch_features: n_crops must be >= 1");
  const int nz = volume.shape[0];
  const size_t plane = static_cast<size_t>(volume.shape[1]) * volume.shape[2];

  // slices where at least one valid crop window exists
  std::vector<int> usable;
  std::vector<std::vector<std::pair<int, int>>> origins_per_z(nz);
  for (int z = 0; z < nz; ++z) {
    Mask fg(plane);
    const uint8_t* lz = labels.classes.data() + static_cast<size_t>(z) * plane;
    for (size_t i = 0; i < plane; ++i) fg[i] = lz[i] != static_cast<uint8_t>(VoxClass::air);
    origins_per_z[z] = valid_crop_origins(fg, volume.shape[1], volume.shape[2], cfg.crop_size);
    if (!origins_per_z[z].empty()) usable.push_back(z);
  }
  if (usable.empty()) {
    throw ConfigError("patch_features: foreground too small for crop_size " +
                      std::to_string(cfg.crop_size));
  }

  // one crop per slice, slices spread evenly over the usable range
  std::vector<std::vector<double>> out;
  for (int i = 0; i < cfg.n_crops; ++i) {
    const int z = usable[(static_cast<size_t>(i) * usable.size()) / cfg.n_crops %
                         usable.size()];
    Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(i)));
    const auto& origins = origins_per_z[z];
    const auto [oy, ox] = origins[rng.uniform_index(origins.size())];
    out.push_back(patch_descriptor(extract_crop(slice_image(volume, z), oy, ox, cfg.crop_size)));
  }
  return out;
}

double ssim(const Image& a, const Image& b, int window, double dynamic_range) {
  if (a.ny != b.ny || a.nx != b.nx) {
    throw ShapeError("ssim: image shapes differ");
  }
  if (window < 3 || window % 2 == 0) throw ConfigError("ssim: window must be odd and >= 3");
  if (a.ny < window || a.nx < window) {
    throw ConfigError("ssim: image smaller than window");
  }
  if (dynamic_range <= 0.0) throw ConfigError("ssim: dynamic_range must be positive");

  // Gaussian window, sigma 1.5 at the default 11x11, scaled with the window
  const double sigma = 1.5 * window / 11.0;
  std::vector<double> w(static_cast<size_t>(window) * window);
  const int half = window / 2;
  double wsum = 0.0;
  for (int y = -half; y <= half; ++y) {
    for (int x = -half; x <= half; ++x) {
      const double v = std::exp(-(y * y + x * x) / (2.0 * sigma * sigma));
      w[static_cast<size_t>(y + half) * window + (x + half)] = v;
      wsum += v;
    }
  }
  for (double& v : w) v /= wsum;

  const double c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
  const double c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);

  double total = 0.0;
  int64_t count = 0;
  for (int oy = 0; oy + window <= a.ny; ++oy) {
    for (int ox = 0; ox + window <= a.nx; ++ox) {
      double ma = 0.0, mb = 0.0;
      for (int y = 0; y < window; ++y) {
        for (int x = 0; x < window; ++x) {
          const double wv = w[static_cast<size_t>(y) * window + x];
          ma += wv * a.at(oy + y, ox + x);
          mb += wv * b.at(oy + y, ox + x);
        }
      }
      double va = 0.0, vb = 0.0, cab = 0.0;
      for (int y = 0; y < window; ++y) {
        for (int x = 0; x < window; ++x) {
          const double wv = w[static_cast<size_t>(y) * window + x];
          const double da = a.at(oy + y, ox + x) - ma;
          const double db = b.at(oy + y, ox + x) - mb;
          va += wv * da * da;
          vb += wv * db * db;
          cab += wv * da * db;
        }
      }
      total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double cycle_consistency_loss(const std::vector<Image>& x, const std::vector<Image>& x_rec,
                              const std::vector<Image>& y, const std::vector<Image>& y_rec) {
  const auto domain_mae = [](const std::vector<Image>& o, const std::vector<Image>& r,
                             const char* which) {
    if (o.size() != r.size()) {
      throw ShapeError(std::string("cycle_consistency_loss: ") + which + " batch sizes differ");
    }
    double sum = 0.0;
    int64_t n = 0;
    for (size_t i = 0; i < o.size(); ++i) {
      if (o[i].ny != r[i].ny || o[i].nx != r[i].nx) {
        throw ShapeError(std::string("cycle_consistency_loss: ") + which + " image shapes differ");
      }
      for (size_t j = 0; j < o[i].data.size(); ++j) {
        sum += std::abs(r[i].data[j] - o[i].data[j]);
        ++n;
      }
    }
    if (n == 0) throw ConfigError("cycle_consistency_loss: empty batch");
    return sum / static_cast<double>(n);
  };
  return domain_mae(x, x_rec, "x") + domain_mae(y, y_rec, "y");
}

namespace {
std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}
}  // namespace

double spearman_rank_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("spearman: series lengths differ");
  if (a.size() < 2) throw ConfigError("spearman: need at least 2 points");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double num = 0.0, da = 0.0, db = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  if (da == 0.0 || db == 0.0) return 0.0;
  return num / std::sqrt(da * db);
}

void to_json(nlohmann::json& j, const FrechetConfig& c) {
  j = nlohmann::json{{"n_crops", c.n_crops},
                     {"crop_size", c.crop_size},
                     {"feature_extractor", c.feature_extractor},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, FrechetConfig& c) {
  c = FrechetConfig{};
  if (j.contains("n_crops")) j.at("n_crops").get_to(c.n_crops);
  if (j.contains("crop_size")) j.at("crop_size").get_to(c.crop_size);
  if (j.contains("feature_extractor")) j.at("feature_extractor").get_to(c.feature_extractor);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per_layer = nlohmann::json::array();
  for (const auto& e : layers.layers) {
    per_layer.push_back({{"z", e.z},
                         {"tp", e.tp},
                         {"fp", e.fp},
                         {"fn", e.fn},
                         {"tn", e.tn},
                         {"precision", e.precision},
                         {"recall", e.recall},
                         {"f1", e.f1},
                         {"iou", e.iou},
                         {"included", e.included},
                         {"pred_empty", e.pred_empty}});
  }
  return nlohmann::json{
      {"dataset_id", dataset_id},
      {"model_id", model_id},
      {"class", class_name},
      {"n_layers", layers.n_layers},
      {"n_included", layers.n_included},
      {"per_layer", per_layer},
      {"mean",
       {{"precision", layers.mean_precision},
        {"recall", layers.mean_recall},
        {"f1", layers.mean_f1},
        {"iou", layers.mean_iou}}},
      {"std",
       {{"precision", layers.std_precision},
        {"recall", layers.std_recall},
        {"f1", layers.std_f1},
        {"iou", layers.std_iou}}},
      {"volume_iou", volume_iou},
      {"volume_dice", volume_dice},
      {"conventions",
       {{"empty_layer_rule", "exclude_both_empty"}, {"both_empty_value", 1.0}}}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.model_id = j.at("model_id").get<std::string>();
  r.class_name = j.at("class").get<std::string>();
  r.layers.n_layers = j.at("n_layers").get<int>();
  r.layers.n_included = j.at("n_included").get<int>();
  for (const auto& e : j.at("per_layer")) {
    LayerEntry le;
    le.z = e.at("z").get<int>();
    le.tp = e.at("tp").get<int64_t>();
    le.fp = e.at("fp").get<int64_t>();
    le.fn = e.at("fn").get<int64_t>();
    le.tn = e.at("tn").get<int64_t>();
    le.precision = e.at("precision").get<double>();
    le.recall = e.at("recall").get<double>();
    le.f1 = e.at("f1").get<double>();
    le.iou = e.at("iou").get<double>();
    le.included = e.at("included").get<bool>();
    le.pred_empty = e.at("pred_empty").get<bool>();
    r.layers.layers.push_back(le);
  }
  r.layers.mean_precision = j.at("mean").at("precision").get<double>();
  r.layers.mean_recall = j.at("mean").at("recall").get<double>();
  r.layers.mean_f1 = j.at("mean").at("f1").get<double>();
  r.layers.mean_iou = j.at("mean").at("iou").get<double>();
  r.layers.std_precision = j.at("std").at("precision").get<double>();
  r.layers.std_recall = j.at("std").at("recall").get<double>();
  r.layers.std_f1 = j.at("std").at("f1").get<double>();
  r.layers.std_iou = j.at("std").at("iou").get<double>();
  r.volume_iou = j.at("volume_iou").get<double>();
  r.volume_dice = j.at("volume_dice").get<double>();
  return r;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "dataset_id,model_id,class,layer,precision,recall,f1,iou,included,pred_empty\n";
  for (const auto& e : layers.layers) {
    os << dataset_id << "," << model_id << "," << class_name << "," << e.z << "," << e.precision
       << "," << e.recall << "," << e.f1 << "," << e.iou << "," << (e.included ? 1 : 0) << ","
       << (e.pred_empty ? 1 : 0) << "\n";
  }
  return os.str();
}

}  // namespace xct::metrics

#include "xct/tomo.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>

#include <nlohmann/json.hpp>

#include "xct/common.hpp"
#include "xct/fft.hpp"
#include "xct/phantom.hpp"

namespace xct::tomo {

namespace {
constexpr double kMarchStep = 0.25;  // ray-marching step, pixels
}

void ScanConfig::validate() const {
  if (n_views < 1) throw ConfigError("scan: n_views must be positive");
  if (angular_range_deg != 180.0 && angular_range_deg != 360.0) {
    throw ConfigError("scan: angular_range must be 180 or 360 degrees");
  }
  if (detector_bins < 1) throw ConfigError("scan: detector_bins must be positive");
  if (subsample_factor < 1) throw ConfigError("scan: subsample_factor must be >= 1");
  if (n_views / subsample_factor < 8) {
    throw ConfigError("scan: n_views / subsample_factor must be >= 8");
  }
  if (beam_hardening_strength < 0.0) throw ConfigError("scan: beam hardening must be >= 0");
  if (noise.kind == NoiseKind::gaussian && noise.sigma < 0.0) {
    throw ConfigError("scan: gaussian sigma must be >= 0");
  }
  if (noise.kind == NoiseKind::poisson && noise.photon_count <= 0.0) {
    throw ConfigError("scan: poisson photon count must be positive");
  }
}

namespace {

double bilinear(const Image& img, double x, double y) {
  // zero outside the grid; pixel centers at integer coordinates
  if (x < 0.0 || y < 0.0 || x > img.nx - 1 || y > img.ny - 1) return 0.0;
  const int x0 = static_cast<int>(x);
  const int y0 = static_cast<int>(y);
  const int x1 = std::min(x0 + 1, img.nx - 1);
  const int y1 = std::min(y0 + 1, img.ny - 1);
  const double fx = x - x0, fy = y - y0;
  return (1 - fy) * ((1 - fx) * img.at(y0, x0) + fx * img.at(y0, x1)) +
         fy * ((1 - fx) * img.at(y1, x0) + fx * img.at(y1, x1));
}

void apply_degradation(Sinogram& sino, const ScanConfig& cfg) {
  const double beta = cfg.beam_hardening_strength;
  if (beta > 0.0) {
    for (double& p : sino.data) p = p - beta * p * p;
  }
  switch (cfg.noise.kind) {
    case NoiseKind::none:
      break;
    case NoiseKind::gaussian: {
      Rng rng(cfg.seed);
      for (double& p : sino.data) p += rng.normal(0.0, cfg.noise.sigma);
      break;
    }
    case NoiseKind::poisson: {
      Rng rng(cfg.seed);
      const double i0 = cfg.noise.photon_count;
      for (double& p : sino.data) {
        const double counts =
            std::max<double>(1.0, static_cast<double>(rng.poisson(i0 * std::exp(-p))));
        p = -std::log(counts / i0);
      }
      break;
    }
  }
}

}  // namespace

Sinogram forward_project(const Image& slice, const ScanConfig& cfg) {
  cfg.validate();
  if (slice.ny != slice.nx) {
    throw ShapeError("forward_project: slice must be square, got " + std::to_string(slice.ny) +
                     "x" + std::to_string(slice.nx));
  }
  const int n = slice.nx;
  const double diag = n * std::sqrt(2.0);
  if (cfg.detector_bins < diag) {
    throw ConfigError("forward_project: detector_bins " + std::to_string(cfg.detector_bins) +
                      " does not span the slice diagonal (" + std::to_string(diag) + ")");
  }

  Sinogram sino;
  sino.n_views = cfg.n_views;
  sino.detector_bins = cfg.detector_bins;
  sino.data.assign(static_cast<size_t>(cfg.n_views) * cfg.detector_bins, 0.0);
  sino.angles.resize(cfg.n_views);
  const double range = cfg.angular_range_deg * M_PI / 180.0;
  for (int v = 0; v < cfg.n_views; ++v) sino.angles[v] = range * v / cfg.n_views;

  const double c = (n - 1) / 2.0;                      // slice center, pixel coords
  const double det_c = (cfg.detector_bins - 1) / 2.0;  // detector center bin
  const double tmax = diag / 2.0 + 1.0;
  const int nsteps = static_cast<int>(std::ceil(2.0 * tmax / kMarchStep));

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int v = 0; v < cfg.n_views; ++v) {
    const double cs = std::cos(sino.angles[v]);
    const double sn = std::sin(sino.angles[v]);
    for (int b = 0; b < cfg.detector_bins; ++b) {
      const double s = b - det_c;
      if (std::abs(s) > tmax) continue;
      // ray: origin s*(cos,sin), direction (-sin, cos); midpoint rule
      double acc = 0.0;
      for (int k = 0; k < nsteps; ++k) {
        const double t = -tmax + (k + 0.5) * kMarchStep;
        const double x = s * cs - t * sn + c;
        const double y = s * sn + t * cs + c;
        acc += bilinear(slice, x, y);
      }
      sino.at(v, b) = acc * kMarchStep;
    }
  }

  apply_degradation(sino, cfg);
  if (cfg.subsample_factor > 1) return subsample_views(sino, cfg.subsample_factor);
  return sino;
}

Sinogram subsample_views(const Sinogram& sino, int factor) {
  if (factor < 1) throw ConfigError("subsample_views: factor must be >= 1");
  if (factor > sino.n_views) {
    throw ConfigError("subsample_views: factor " + std::to_string(factor) + " exceeds " +
                      std::to_string(sino.n_views) + " views");
  }
  if (factor == 1) return sino;
  Sinogram out;
  out.detector_bins = sino.detector_bins;
  out.n_views = (sino.n_views + factor - 1) / factor;
  out.data.reserve(static_cast<size_t>(out.n_views) * out.detector_bins);
  out.angles.reserve(out.n_views);
  for (int v = 0; v < sino.n_views; v += factor) {
    out.angles.push_back(sino.angles[v]);
    out.data.insert(out.data.end(), sino.view(v), sino.view(v) + sino.detector_bins);
  }
  return out;
}

namespace {

// Frequency response of the band-limited ramp (Kak & Slaney construction:
// FFT of the discrete spatial kernel; avoids the DC bias of a raw |f| ramp).
std::vector<double> ramp_filter(size_t m, Apodization apo) {
  std::vector<std::complex<double>> h(m, 0.0);
  h[0] = 0.25;
  for (size_t k = 1; k < m / 2; k += 2) {
    const double v = -1.0 / (M_PI * M_PI * static_cast<double>(k) * static_cast<double>(k));
    h[k] = v;
    h[m - k] = v;
  }
  fft_inplace(h, false);
  std::vector<double> filt(m);
  for (size_t k = 0; k < m; ++k) {
    const double nu = (k <= m / 2 ? static_cast<double>(k) : static_cast<double>(m - k)) /
                      static_cast<double>(m);  // cycles/sample, [0, 0.5]
    double w = 1.0;
    switch (apo) {
      case Apodization::none: w = 1.0; break;
      case Apodization::hann: w = 0.5 * (1.0 + std::cos(2.0 * M_PI * nu)); break;
      case Apodization::hamming: w = 0.54 + 0.46 * std::cos(2.0 * M_PI * nu); break;
      case Apodization::cosine: w = std::cos(M_PI * nu); break;
    }
    filt[k] = h[k].real() * w;
  }
  return filt;
}

}  // namespace

Image fbp_reconstruct(const Sinogram& sino, int out_size, Apodization apodization) {
  if (sino.n_views < 8) {
    throw ConfigError("fbp_reconstruct: insufficient views (" + std::to_string(sino.n_views) +
                      " < 8)");
  }
  if (out_size < 1 || out_size > sino.detector_bins) {
    throw ConfigError("fbp_reconstruct: out_size must be in [1, detector_bins]");
  }
  for (double v : sino.data) {
    if (!std::isfinite(v)) throw NumericError("fbp_reconstruct: non-finite sinogram entry");
  }

  const int d = sino.detector_bins;
  const size_t m = next_pow2(static_cast<size_t>(2 * d));
  const auto filt = ramp_filter(m, apodization);

  // filter all views
  std::vector<double> q(static_cast<size_t>(sino.n_views) * d);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int v = 0; v < sino.n_views; ++v) {
    std::vector<std::complex<double>> row(m, 0.0);
    for (int b = 0; b < d; ++b) row[b] = sino.at(v, b);
    fft_inplace(row, false);
    for (size_t k = 0; k < m; ++k) row[k] *= filt[k];
    fft_inplace(row, true);
    for (int b = 0; b < d; ++b) q[static_cast<size_t>(v) * d + b] = row[b].real();
  }

  Image out(out_size, out_size);
  const double c = (out_size - 1) / 2.0;
  const double det_c = (d - 1) / 2.0;
  const double scale = M_PI / sino.n_views;
  std::vector<double> cs(sino.n_views), sn(sino.n_views);
  for (int v = 0; v < sino.n_views; ++v) {
    cs[v] = std::cos(sino.angles[v]);
    sn[v] = std::sin(sino.angles[v]);
  }

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int y = 0; y < out_size; ++y) {
    for (int x = 0; x < out_size; ++x) {
      const double px = x - c, py = y - c;
      double acc = 0.0;
      for (int v = 0; v < sino.n_views; ++v) {
        const double s = px * cs[v] + py * sn[v] + det_c;
        if (s < 0.0 || s > d - 1) continue;
        const int s0 = static_cast<int>(s);
        const int s1 = std::min(s0 + 1, d - 1);
        const double f = s - s0;
        const double* row = &q[static_cast<size_t>(v) * d];
        acc += (1.0 - f) * row[s0] + f * row[s1];
      }
      out.at(y, x) = acc * scale;
    }
  }
  for (double v : out.data) {
    if (!std::isfinite(v)) throw NumericError("fbp_reconstruct: non-finite output");
  }
  return out;
}

Volume simulate_scan(const LabelVolume& labels, const MuMap& mu, const ScanConfig& cfg) {
  cfg.validate();
  if (labels.shape[1] != labels.shape[2]) {
    throw ShapeError("simulate_scan: slices must be square");
  }
  const int nz = labels.shape[0];
  const int n = labels.shape[2];
  const Volume att =
      phantom::attenuation_from_labels(labels, mu.material, mu.inclusion, labels.voxel_pitch_um);
  Volume out(nz, n, n, labels.voxel_pitch_um);

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (int z = 0; z < nz; ++z) {
    ScanConfig slice_cfg = cfg;
    slice_cfg.seed = mix_seed(cfg.seed, static_cast<uint64_t>(z));
    const Image img = slice_image(att, z);
    const Sinogram sino = forward_project(img, slice_cfg);
    const Image rec = fbp_reconstruct(sino, n, cfg.apodization);
    float* dst = out.slice(z);
    for (size_t i = 0; i < rec.data.size(); ++i) dst[i] = static_cast<float>(rec.data[i]);
  }
  return out;
}

namespace {
constexpr const char* kNoiseNames[] = {"none", "gaussian", "poisson"};
constexpr const char* kApoNames[] = {"none", "hann", "hamming", "cosine"};

template <size_t N>
int name_index(const char* const (&names)[N], const std::string& s, const char* what) {
  for (size_t i = 0; i < N; ++i) {
    if (s == names[i]) return static_cast<int>(i);
  }
  throw ConfigError(std::string("unknown ") + what + ": " + s);
}
}  // namespace

void to_json(nlohmann::json& j, const ScanConfig& c) {
  j = nlohmann::json{{"n_views", c.n_views},
                     {"angular_range_deg", c.angular_range_deg},
                     {"detector_bins", c.detector_bins},
                     {"noise",
                      {{"kind", kNoiseNames[static_cast<int>(c.noise.kind)]},
                       {"sigma", c.noise.sigma},
                       {"photon_count", c.noise.photon_count}}},
                     {"beam_hardening_strength", c.beam_hardening_strength},
                     {"subsample_factor", c.subsample_factor},
                     {"apodization", kApoNames[static_cast<int>(c.apodization)]},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ScanConfig& c) {
  c = ScanConfig{};
  if (j.contains("n_views")) j.at("n_views").get_to(c.n_views);
  if (j.contains("angular_range_deg")) j.at("angular_range_deg").get_to(c.angular_range_deg);
  if (j.contains("detector_bins")) j.at("detector_bins").get_to(c.detector_bins);
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    c.noise.kind = static_cast<NoiseKind>(
        name_index(kNoiseNames, n.at("kind").get<std::string>(), "noise model"));
    if (n.contains("sigma")) n.at("sigma").get_to(c.noise.sigma);
    if (n.contains("photon_count")) n.at("photon_count").get_to(c.noise.photon_count);
  }
  if (j.contains("beam_hardening_strength")) {
    j.at("beam_hardening_strength").get_to(c.beam_hardening_strength);
  }
  if (j.contains("subsample_factor")) j.at("subsample_factor").get_to(c.subsample_factor);
  if (j.contains("apodization")) {
    c.apodization = static_cast<Apodization>(
        name_index(kApoNames, j.at("apodization").get<std::string>(), "apodization"));
  }
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

void save_sinogram(const Sinogram& s, const std::string& path_base, const nlohmann::json* meta) {
  std::vector<float> raw(s.data.size());
  for (size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<float>(s.data[i]);
  std::ofstream f(path_base + ".raw", std::ios::binary);
  if (!f) throw ConfigError("cannot write: " + path_base + ".raw");
  f.write(reinterpret_cast<const char*>(raw.data()),
          static_cast<std::streamsize>(raw.size() * sizeof(float)));

  nlohmann::json j;
  j["n_views"] = s.n_views;
  j["detector_bins"] = s.detector_bins;
  j["angles"] = s.angles;
  j["dtype"] = "float32";
  j["geometry"] = Sinogram::geometry;
  if (meta) j["config"] = *meta;
  std::ofstream jf(path_base + ".json");
  if (!jf) throw ConfigError("cannot write sidecar: " + path_base + ".json");
  jf << j.dump(2) << "\n";
}

Sinogram load_sinogram(const std::string& path_base) {
  std::ifstream jf(path_base + ".json");
  if (!jf) throw ConfigError("missing sidecar: " + path_base + ".json");
  nlohmann::json j;
  jf >> j;
  Sinogram s;
  s.n_views = j.at("n_views").get<int>();
  s.detector_bins = j.at("detector_bins").get<int>();
  s.angles = j.at("angles").get<std::vector<double>>();
  std::vector<float> raw(static_cast<size_t>(s.n_views) * s.detector_bins);
  std::ifstream f(path_base + ".raw", std::ios::binary);
  if (!f) throw ConfigError("cannot read: " + path_base + ".raw");
  f.read(reinterpret_cast<char*>(raw.data()),
         static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (static_cast<size_t>(f.gcount()) != raw.size() * sizeof(float)) {
    throw ConfigError("short read: " + path_base + ".raw");
  }
  s.data.assign(raw.begin(), raw.end());
  return s;
}

}  // namespace xct::tomo

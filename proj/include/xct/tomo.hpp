#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "xct/volume.hpp"

namespace xct::tomo {

enum class NoiseKind { none, gaussian, poisson };

struct NoiseModel {
  NoiseKind kind = NoiseKind::none;
  double sigma = 0.0;          // gaussian, in line-integral units
  double photon_count = 1e5;   // poisson, incident photons per ray

  static NoiseModel none() { return {}; }
  static NoiseModel gaussian(double sigma) { return {NoiseKind::gaussian, sigma, 0.0}; }
  static NoiseModel poisson(double photons) { return {NoiseKind::poisson, 0.0, photons}; }
};

enum class Apodization { none, hann, hamming, cosine };

struct ScanConfig {
  int n_views = 720;
  double angular_range_deg = 180.0;  // 180 or 360
  int detector_bins = 96;
  NoiseModel noise;
  double beam_hardening_strength = 0.0;  // p' = p - beta * p^2
  int subsample_factor = 1;
  Apodization apodization = Apodization::hann;
  uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const ScanConfig& c);
void from_json(const nlohmann::json& j, ScanConfig& c);

// Parallel-beam sinogram: rows ordered by strictly increasing view angle.
struct Sinogram {
  int n_views = 0;
  int detector_bins = 0;
  std::vector<double> data;    // [n_views][detector_bins]
  std::vector<double> angles;  // radians
  static constexpr const char* geometry = "parallel";

  double& at(int v, int b) { return data[static_cast<size_t>(v) * detector_bins + b]; }
  double at(int v, int b) const { return data[static_cast<size_t>(v) * detector_bins + b]; }
  const double* view(int v) const { return data.data() + static_cast<size_t>(v) * detector_bins; }
};

void save_sinogram(const Sinogram& s, const std::string& path_base,
                   const nlohmann::json* meta = nullptr);
Sinogram load_sinogram(const std::string& path_base);

// Discretized line integrals of a square slice (pixel pitch 1), with the
// beam-hardening surrogate and sinogram-domain noise applied per config.
// Subsampling strides the view set after simulation. Deterministic in cfg.seed.
Sinogram forward_project(const Image& slice, const ScanConfig& cfg);

// Retains every factor-th view starting at index 0.
Sinogram subsample_views(const Sinogram& sino, int factor);

// Filtered backprojection with a ramp filter and selectable apodization.
Image fbp_reconstruct(const Sinogram& sino, int out_size,
                      Apodization apodization = Apodization::hann);

struct MuMap {
  double material = 0.02;
  double inclusion = 0.04;
};

// Slice-by-slice forward projection, degradation, and FBP over a label volume.
// Noise RNG is keyed by (seed, slice index) so slice order never matters.
Volume simulate_scan(const LabelVolume& labels, const MuMap& mu, const ScanConfig& cfg);

}  // namespace xct::tomo

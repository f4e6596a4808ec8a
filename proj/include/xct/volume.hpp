#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "xct/common.hpp"

namespace xct {

// Voxel classes, fixed across the whole pipeline.
enum class VoxClass : uint8_t { air = 0, material = 1, pore = 2, inclusion = 3 };
inline constexpr int kNumClasses = 4;

const char* vox_class_name(VoxClass c);
VoxClass vox_class_from_name(const std::string& name);

// 3D scalar field of attenuation values, z-major (z slowest, x fastest).
struct Volume {
  std::array<int, 3> shape{0, 0, 0};  // {nz, ny, nx}
  double voxel_pitch_um = 1.0;
  std::vector<float> data;

  Volume() = default;
  Volume(int nz, int ny, int nx, double pitch_um = 1.0)
      : shape{nz, ny, nx}, voxel_pitch_um(pitch_um),
        data(static_cast<size_t>(nz) * ny * nx, 0.0f) {}

  size_t size() const { return data.size(); }
  float& at(int z, int y, int x) {
    return data[(static_cast<size_t>(z) * shape[1] + y) * shape[2] + x];
  }
  float at(int z, int y, int x) const {
    return data[(static_cast<size_t>(z) * shape[1] + y) * shape[2] + x];
  }
  // one z-slice as a contiguous span of ny*nx floats
  const float* slice(int z) const { return data.data() + static_cast<size_t>(z) * shape[1] * shape[2]; }
  float* slice(int z) { return data.data() + static_cast<size_t>(z) * shape[1] * shape[2]; }
};

// Per-voxel class IDs over {air, material, pore, inclusion}, same layout as Volume.
struct LabelVolume {
  std::array<int, 3> shape{0, 0, 0};
  double voxel_pitch_um = 1.0;
  std::vector<uint8_t> classes;

  LabelVolume() = default;
  LabelVolume(int nz, int ny, int nx, double pitch_um = 1.0)
      : shape{nz, ny, nx}, voxel_pitch_um(pitch_um),
        classes(static_cast<size_t>(nz) * ny * nx, 0) {}

  size_t size() const { return classes.size(); }
  uint8_t& at(int z, int y, int x) {
    return classes[(static_cast<size_t>(z) * shape[1] + y) * shape[2] + x];
  }
  uint8_t at(int z, int y, int x) const {
    return classes[(static_cast<size_t>(z) * shape[1] + y) * shape[2] + x];
  }
};

// 2D scalar image (row-major), the slice-level working type.
struct Image {
  int ny = 0, nx = 0;
  std::vector<double> data;

  Image() = default;
  Image(int ny_, int nx_, double fill = 0.0)
      : ny(ny_), nx(nx_), data(static_cast<size_t>(ny_) * nx_, fill) {}

  size_t size() const { return data.size(); }
  double& at(int y, int x) { return data[static_cast<size_t>(y) * nx + x]; }
  double at(int y, int x) const { return data[static_cast<size_t>(y) * nx + x]; }
};

Image slice_image(const Volume& v, int z);

// Raw little-endian persistence with a JSON sidecar. `path_base` gets ".raw"
// and ".json" suffixes. `meta` is merged into the sidecar (seed, spec, ...).
void save_volume(const Volume& v, const std::string& path_base,
                 const nlohmann::json* meta = nullptr);
Volume load_volume(const std::string& path_base);

void save_labels(const LabelVolume& v, const std::string& path_base,
                 const nlohmann::json* meta = nullptr);
LabelVolume load_labels(const std::string& path_base);

}  // namespace xct

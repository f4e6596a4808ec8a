#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "xct/volume.hpp"

namespace xct::phantom {

// Parametric solid: a union of axis-aligned primitives. Extents are fractions
// of the grid half-extent so specs stay grid-size independent.
struct Primitive {
  enum class Kind { cylinder, box };
  Kind kind = Kind::cylinder;
  double radius_frac = 0.8;                         // cylinder, of min(nx,ny)/2
  double height_frac = 0.9;                         // cylinder, of nz
  std::array<double, 3> half_extent_frac{0.4, 0.4, 0.4};  // box, {z,y,x} of grid/2
  std::array<double, 3> center_frac{0.0, 0.0, 0.0};  // offset from grid center, of grid/2
};

struct PartShape {
  std::vector<Primitive> solids;  // union

  static PartShape cylinder(double radius_frac = 0.8, double height_frac = 0.9);
  static PartShape box(std::array<double, 3> half_extent_frac = {0.4, 0.4, 0.4});
  static PartShape composite(std::vector<Primitive> solids);
};

struct PhantomSpec {
  std::array<int, 3> grid_shape{64, 64, 64};  // {nz, ny, nx}
  double voxel_pitch_um = 17.3;
  PartShape part_shape = PartShape::cylinder();
  double mu_material = 0.02;   // inverse length, > 0
  double mu_inclusion = 0.04;  // must exceed mu_material
  double pore_density_target = 0.0;       // volume fraction in [0, 0.1]
  double inclusion_density_target = 0.0;  // volume fraction in [0, 0.05]
  double flaw_r_min = 1.0;  // equivalent spherical radius, voxels
  double flaw_r_max = 3.0;
  std::array<double, 2> axis_ratio_range{0.5, 2.0};
  uint64_t seed = 0;

  void validate() const;  // throws ConfigError when an invariant is violated
};

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);

struct PhantomResult {
  LabelVolume labels;
  Volume volume;  // attenuation: air=0, material=mu_material, pore=0, inclusion=mu_inclusion
};

// Rasterizes the part and embeds spheroidal flaws at the target densities by
// rejection sampling inside the 1-voxel-eroded envelope. Deterministic in seed.
// Unreachable density targets raise ConfigError naming the achievable maximum.
PhantomResult generate_phantom(const PhantomSpec& spec);

// count(class voxels) / count(part voxels); class must be pore or inclusion.
double defect_volume_density(const LabelVolume& labels, VoxClass class_id);

// Attenuation volume for a label volume (class-mapped coefficients).
Volume attenuation_from_labels(const LabelVolume& labels, double mu_material,
                               double mu_inclusion, double voxel_pitch_um);

}  // namespace xct::phantom

#include "xct/phantom.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "xct/common.hpp"

namespace xct::phantom {

PartShape PartShape::cylinder(double radius_frac, double height_frac) {
  Primitive p;
  p.kind = Primitive::Kind::cylinder;
  p.radius_frac = radius_frac;
  p.height_frac = height_frac;
  return PartShape{{p}};
}

PartShape PartShape::box(std::array<double, 3> half_extent_frac) {
  Primitive p;
  p.kind = Primitive::Kind::box;
  p.half_extent_frac = half_extent_frac;
  return PartShape{{p}};
}

PartShape PartShape::composite(std::vector<Primitive> solids) { return PartShape{std::move(solids)}; }

void PhantomSpec::validate() const {
  for (int d : grid_shape) {
    if (d < 4) throw ConfigError("phantom: grid dimensions must be >= 4 voxels");
  }
  if (voxel_pitch_um <= 0) throw ConfigError("phantom: voxel pitch must be positive");
  if (part_shape.solids.empty()) throw ConfigError("phantom: empty part shape");
  if (!(mu_material > 0.0) || !(mu_inclusion > mu_material)) {
    throw ConfigError("phantom: require mu_inclusion > mu_material > 0");
  }
  if (pore_density_target < 0.0 || pore_density_target > 0.1) {
    throw ConfigError("phantom: pore_density_target outside [0, 0.1]");
  }
  if (inclusion_density_target < 0.0 || inclusion_density_target > 0.05) {
    throw ConfigError("phantom: inclusion_density_target outside [0, 0.05]");
  }
  if (flaw_r_min < 1.0 || flaw_r_max < flaw_r_min) {
    throw ConfigError("phantom: flaw size range requires 1 <= min <= max");
  }
  if (axis_ratio_range[0] <= 0.0 || axis_ratio_range[1] < axis_ratio_range[0]) {
    throw ConfigError("phantom: bad axis ratio range");
  }
}

namespace {

constexpr const char* kKindNames[] = {"cylinder", "box"};

bool inside_primitive(const Primitive& p, const std::array<int, 3>& g, double z, double y,
                      double x) {
  const double cz = (g[0] - 1) / 2.0 + p.center_frac[0] * g[0] / 2.0;
  const double cy = (g[1] - 1) / 2.0 + p.center_frac[1] * g[1] / 2.0;
  const double cx = (g[2] - 1) / 2.0 + p.center_frac[2] * g[2] / 2.0;
  switch (p.kind) {
    case Primitive::Kind::cylinder: {
      const double r = p.radius_frac * std::min(g[1], g[2]) / 2.0;
      const double hh = p.height_frac * g[0] / 2.0;
      const double dy = y - cy, dx = x - cx;
      return std::abs(z - cz) <= hh && dy * dy + dx * dx <= r * r;
    }
    case Primitive::Kind::box: {
      return std::abs(z - cz) <= p.half_extent_frac[0] * g[0] / 2.0 &&
             std::abs(y - cy) <= p.half_extent_frac[1] * g[1] / 2.0 &&
             std::abs(x - cx) <= p.half_extent_frac[2] * g[2] / 2.0;
    }
  }
  return false;
}

struct FlawVoxel {
  int dz, dy, dx;
  double rho;  // normalized radial metric, used to paint center-out
};

// Voxel offsets covered by an axis-aligned spheroid with semi-axes (az,ay,ax)
// centered on a voxel, sorted center-out.
std::vector<FlawVoxel> rasterize_spheroid(double az, double ay, double ax) {
  std::vector<FlawVoxel> out;
  const int bz = static_cast<int>(std::floor(az));
  const int by = static_cast<int>(std::floor(ay));
  const int bx = static_cast<int>(std::floor(ax));
  for (int dz = -bz; dz <= bz; ++dz) {
    for (int dy = -by; dy <= by; ++dy) {
      for (int dx = -bx; dx <= bx; ++dx) {
        const double rho = (dz / az) * (dz / az) + (dy / ay) * (dy / ay) + (dx / ax) * (dx / ax);
        if (rho <= 1.0) out.push_back({dz, dy, dx, rho});
      }
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const FlawVoxel& a, const FlawVoxel& b) { return a.rho < b.rho; });
  return out;
}

class FlawPlacer {
 public:
  FlawPlacer(LabelVolume& labels, const std::vector<uint8_t>& eroded, int64_t part_count,
             const PhantomSpec& spec, Rng& rng)
      : labels_(labels), eroded_(eroded), part_count_(part_count), spec_(spec), rng_(rng) {
    for (size_t i = 0; i < eroded.size(); ++i) {
      if (eroded[i]) centers_.push_back(static_cast<int64_t>(i));
    }
  }

  // Paints `cls` voxels until round(target*part_count) are placed. The final
  // flaw is trimmed center-out so the achieved count hits the budget exactly.
  void place(VoxClass cls, double target) {
    const int64_t want = std::llround(target * static_cast<double>(part_count_));
    if (want == 0) return;
    if (centers_.empty() || static_cast<int64_t>(centers_.size()) < want) {
      throw ConfigError("density infeasible for " + std::string(vox_class_name(cls)) +
                        ": achievable maximum ~" +
                        std::to_string(static_cast<double>(centers_.size()) /
                                       static_cast<double>(part_count_)));
    }
    const auto [nz, ny, nx] = labels_.shape;
    int64_t placed = 0;
    int rejects = 0;
    const int max_rejects = 20000;
    while (placed < want) {
      if (rejects > max_rejects) {
        throw ConfigError("density infeasible for " + std::string(vox_class_name(cls)) +
                          ": achievable maximum ~" +
                          std::to_string(static_cast<double>(placed) /
                                         static_cast<double>(part_count_)));
      }
      // aim the flaw volume at the remaining budget near the end
      const double remaining = static_cast<double>(want - placed);
      double r_hi = spec_.flaw_r_max;
      const double r_need = std::cbrt(remaining * 3.0 / (4.0 * M_PI));
      r_hi = std::max(spec_.flaw_r_min, std::min(r_hi, r_need));
      const double r = rng_.uniform(spec_.flaw_r_min, r_hi);
      double q[3];
      for (double& v : q) v = rng_.uniform(spec_.axis_ratio_range[0], spec_.axis_ratio_range[1]);
      const double norm = std::cbrt(q[0] * q[1] * q[2]);
      const double az = r * q[0] / norm, ay = r * q[1] / norm, ax = r * q[2] / norm;

      const int64_t cidx = centers_[rng_.uniform_index(centers_.size())];
      const int cz = static_cast<int>(cidx / (static_cast<int64_t>(ny) * nx));
      const int cy = static_cast<int>((cidx / nx) % ny);
      const int cx = static_cast<int>(cidx % nx);

      const auto voxels = rasterize_spheroid(az, ay, ax);
      bool fits = true;
      for (const auto& v : voxels) {
        const int z = cz + v.dz, y = cy + v.dy, x = cx + v.dx;
        if (z < 0 || z >= nz || y < 0 || y >= ny || x < 0 || x >= nx ||
            !eroded_[(static_cast<size_t>(z) * ny + y) * nx + x]) {
          fits = false;
          break;
        }
      }
      if (!fits) {
        ++rejects;
        continue;
      }
      int64_t painted = 0;
      for (const auto& v : voxels) {
        if (placed >= want) break;
        auto& cell = labels_.at(cz + v.dz, cy + v.dy, cx + v.dx);
        if (cell == static_cast<uint8_t>(VoxClass::material)) {
          cell = static_cast<uint8_t>(cls);
          ++placed;
          ++painted;
        }
      }
      if (painted == 0) {
        ++rejects;  // flaw fell entirely on existing defects
      } else {
        rejects = 0;
      }
    }
  }

 private:
  LabelVolume& labels_;
  const std::vector<uint8_t>& eroded_;
  int64_t part_count_;
  const PhantomSpec& spec_;
  Rng& rng_;
  std::vector<int64_t> centers_;
};

}  // namespace

PhantomResult generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const auto [nz, ny, nx] = spec.grid_shape;

  LabelVolume labels(nz, ny, nx, spec.voxel_pitch_um);
  std::vector<uint8_t> part(labels.size(), 0);
  int64_t part_count = 0;
  for (int z = 0; z < nz; ++z) {
    for (int y = 0; y < ny; ++y) {
      for (int x = 0; x < nx; ++x) {
        bool in = false;
        for (const auto& p : spec.part_shape.solids) {
          if (inside_primitive(p, spec.grid_shape, z, y, x)) {
            in = true;
            break;
          }
        }
        if (in) {
          part[(static_cast<size_t>(z) * ny + y) * nx + x] = 1;
          labels.at(z, y, x) = static_cast<uint8_t>(VoxClass::material);
          ++part_count;
        }
      }
    }
  }
  if (part_count == 0) throw ConfigError("phantom: part shape rasterizes to zero voxels");

  // 1-voxel erosion (6-neighborhood); flaws are confined to this interior
  std::vector<uint8_t> eroded(part.size(), 0);
  auto at = [&](int z, int y, int x) -> uint8_t {
    if (z < 0 || z >= nz || y < 0 || y >= ny || x < 0 || x >= nx) return 0;
    return part[(static_cast<size_t>(z) * ny + y) * nx + x];
  };
  for (int z = 0; z < nz; ++z) {
    for (int y = 0; y < ny; ++y) {
      for (int x = 0; x < nx; ++x) {
        if (at(z, y, x) && at(z - 1, y, x) && at(z + 1, y, x) && at(z, y - 1, x) &&
            at(z, y + 1, x) && at(z, y, x - 1) && at(z, y, x + 1)) {
          eroded[(static_cast<size_t>(z) * ny + y) * nx + x] = 1;
        }
      }
    }
  }

  Rng rng(spec.seed);
  FlawPlacer placer(labels, eroded, part_count, spec, rng);
  // inclusions first; pores never overwrite them (a voxel holds one defect)
  placer.place(VoxClass::inclusion, spec.inclusion_density_target);
  placer.place(VoxClass::pore, spec.pore_density_target);

  PhantomResult out;
  out.volume =
      attenuation_from_labels(labels, spec.mu_material, spec.mu_inclusion, spec.voxel_pitch_um);
  out.labels = std::move(labels);
  return out;
}

double defect_volume_density(const LabelVolume& labels, VoxClass class_id) {
  if (class_id != VoxClass::pore && class_id != VoxClass::inclusion) {
    throw ConfigError("defect_volume_density: class must be pore or inclusion");
  }
  int64_t part = 0, cls = 0;
  for (uint8_t c : labels.classes) {
    if (c != static_cast<uint8_t>(VoxClass::air)) ++part;
    if (c == static_cast<uint8_t>(class_id)) ++cls;
  }
  if (part == 0) throw ConfigError("defect_volume_density: empty part");
  return static_cast<double>(cls) / static_cast<double>(part);
}

Volume attenuation_from_labels(const LabelVolume& labels, double mu_material,
                               double mu_inclusion, double voxel_pitch_um) {
  Volume v(labels.shape[0], labels.shape[1], labels.shape[2], voxel_pitch_um);
  for (size_t i = 0; i < labels.classes.size(); ++i) {
    switch (static_cast<VoxClass>(labels.classes[i])) {
      case VoxClass::material: v.data[i] = static_cast<float>(mu_material); break;
      case VoxClass::inclusion: v.data[i] = static_cast<float>(mu_inclusion); break;
      case VoxClass::air:
      case VoxClass::pore: v.data[i] = 0.0f; break;
    }
  }
  return v;
}

void to_json(nlohmann::json& j, const PhantomSpec& s) {
  nlohmann::json solids = nlohmann::json::array();
  for (const auto& p : s.part_shape.solids) {
    solids.push_back({{"kind", kKindNames[static_cast<int>(p.kind)]},
                      {"radius_frac", p.radius_frac},
                      {"height_frac", p.height_frac},
                      {"half_extent_frac", p.half_extent_frac},
                      {"center_frac", p.center_frac}});
  }
  j = nlohmann::json{{"grid_shape", s.grid_shape},
                     {"voxel_pitch_um", s.voxel_pitch_um},
                     {"part_shape", solids},
                     {"mu_material", s.mu_material},
                     {"mu_inclusion", s.mu_inclusion},
                     {"pore_density_target", s.pore_density_target},
                     {"inclusion_density_target", s.inclusion_density_target},
                     {"flaw_r_min", s.flaw_r_min},
                     {"flaw_r_max", s.flaw_r_max},
                     {"axis_ratio_range", s.axis_ratio_range},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, PhantomSpec& s) {
  s = PhantomSpec{};
  j.at("grid_shape").get_to(s.grid_shape);
  if (j.contains("voxel_pitch_um")) j.at("voxel_pitch_um").get_to(s.voxel_pitch_um);
  if (j.contains("part_shape")) {
    s.part_shape.solids.clear();
    for (const auto& e : j.at("part_shape")) {
      Primitive p;
      const auto kind = e.at("kind").get<std::string>();
      if (kind == "cylinder") {
        p.kind = Primitive::Kind::cylinder;
      } else if (kind == "box") {
        p.kind = Primitive::Kind::box;
      } else {
        throw ConfigError("phantom: unknown primitive kind " + kind);
      }
      if (e.contains("radius_frac")) e.at("radius_frac").get_to(p.radius_frac);
      if (e.contains("height_frac")) e.at("height_frac").get_to(p.height_frac);
      if (e.contains("half_extent_frac")) e.at("half_extent_frac").get_to(p.half_extent_frac);
      if (e.contains("center_frac")) e.at("center_frac").get_to(p.center_frac);
      s.part_shape.solids.push_back(p);
    }
  }
  j.at("mu_material").get_to(s.mu_material);
  j.at("mu_inclusion").get_to(s.mu_inclusion);
  if (j.contains("pore_density_target")) j.at("pore_density_target").get_to(s.pore_density_target);
  if (j.contains("inclusion_density_target")) {
    j.at("inclusion_density_target").get_to(s.inclusion_density_target);
  }
  if (j.contains("flaw_r_min")) j.at("flaw_r_min").get_to(s.flaw_r_min);
  if (j.contains("flaw_r_max")) j.at("flaw_r_max").get_to(s.flaw_r_max);
  if (j.contains("axis_ratio_range")) j.at("axis_ratio_range").get_to(s.axis_ratio_range);
  if (j.contains("seed")) j.at("seed").get_to(s.seed);
}

}  // namespace xct::phantom

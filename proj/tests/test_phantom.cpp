#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "xct/phantom.hpp"

using namespace xct;
using phantom::PartShape;
using phantom::PhantomSpec;

namespace {

PhantomSpec base_spec() {
  PhantomSpec s;
  s.grid_shape = {48, 48, 48};
  s.part_shape = PartShape::cylinder(0.8, 0.9);
  s.mu_material = 0.02;
  s.mu_inclusion = 0.04;
  s.seed = 7;
  return s;
}

int64_t count_class(const LabelVolume& v, VoxClass c) {
  int64_t n = 0;
  for (uint8_t x : v.classes) {
    if (x == static_cast<uint8_t>(c)) ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("tr-1-like targets are hit within tolerance") {
  PhantomSpec s = base_spec();
  s.grid_shape = {64, 64, 64};
  s.pore_density_target = 0.03;
  s.inclusion_density_target = 0.006;
  auto r = phantom::generate_phantom(s);
  const double pd = phantom::defect_volume_density(r.labels, VoxClass::pore);
  const double id = phantom::defect_volume_density(r.labels, VoxClass::inclusion);
  CHECK(std::abs(pd - 0.03) / 0.03 < 0.2);
  CHECK(std::abs(id - 0.006) / 0.006 < 0.2);
}

TEST_CASE("zero targets produce only air and material") {
  auto r = phantom::generate_phantom(base_spec());
  CHECK(count_class(r.labels, VoxClass::pore) == 0);
  CHECK(count_class(r.labels, VoxClass::inclusion) == 0);
  CHECK(count_class(r.labels, VoxClass::material) > 0);
}

TEST_CASE("single spherical pore matches the exhaustive voxel-count oracle") {
  PhantomSpec s;
  s.grid_shape = {64, 64, 64};
  s.part_shape = PartShape::box({0.8, 0.8, 0.8});
  s.mu_material = 0.02;
  s.mu_inclusion = 0.04;
  s.flaw_r_min = 4.0;
  s.flaw_r_max = 4.0;
  s.axis_ratio_range = {1.0, 1.0};
  s.seed = 3;

  // part size first, from a flawless run
  auto clean = phantom::generate_phantom(s);
  const int64_t part = count_class(clean.labels, VoxClass::material);
  const int64_t sphere = oracle::sphere_voxel_count(4.0);

  s.pore_density_target = static_cast<double>(sphere) / static_cast<double>(part);
  auto r = phantom::generate_phantom(s);
  CHECK(count_class(r.labels, VoxClass::pore) == sphere);
  CHECK(phantom::defect_volume_density(r.labels, VoxClass::pore) ==
        doctest::Approx(s.pore_density_target).epsilon(1e-12));
}

TEST_CASE("defect_volume_density: trivial and constructed cases") {
  LabelVolume v(10, 10, 10);
  std::fill(v.classes.begin(), v.classes.begin() + 1000,
            static_cast<uint8_t>(VoxClass::material));
  CHECK(phantom::defect_volume_density(v, VoxClass::pore) == 0.0);
  CHECK(phantom::defect_volume_density(v, VoxClass::inclusion) == 0.0);

  for (int i = 0; i < 30; ++i) v.classes[static_cast<size_t>(i)] = static_cast<uint8_t>(VoxClass::pore);
  CHECK(phantom::defect_volume_density(v, VoxClass::pore) == doctest::Approx(0.03).epsilon(1e-12));

  LabelVolume empty(4, 4, 4);  // all air
  CHECK_THROWS_AS(phantom::defect_volume_density(empty, VoxClass::pore), ConfigError);
  CHECK_THROWS_AS(phantom::defect_volume_density(v, VoxClass::material), ConfigError);
}

TEST_CASE("generator round-trips through defect_volume_density") {
  PhantomSpec s = base_spec();
  s.pore_density_target = 0.02;
  s.inclusion_density_target = 0.004;
  auto r = phantom::generate_phantom(s);
  CHECK(std::abs(phantom::defect_volume_density(r.labels, VoxClass::pore) - 0.02) / 0.02 < 0.2);
  CHECK(std::abs(phantom::defect_volume_density(r.labels, VoxClass::inclusion) - 0.004) / 0.004 <
        0.2);
}

TEST_CASE("identical specs produce bit-identical volumes") {
  PhantomSpec s = base_spec();
  s.pore_density_target = 0.03;
  s.inclusion_density_target = 0.005;
  auto a = phantom::generate_phantom(s);
  auto b = phantom::generate_phantom(s);
  CHECK(a.labels.classes == b.labels.classes);
  CHECK(a.volume.data == b.volume.data);
}

TEST_CASE("attenuation equals the class-mapped coefficient at every voxel") {
  PhantomSpec s = base_spec();
  s.pore_density_target = 0.02;
  s.inclusion_density_target = 0.01;
  auto r = phantom::generate_phantom(s);
  for (size_t i = 0; i < r.labels.classes.size(); ++i) {
    const auto c = static_cast<VoxClass>(r.labels.classes[i]);
    const float expect = c == VoxClass::material ? 0.02f
                         : c == VoxClass::inclusion ? 0.04f
                                                    : 0.0f;
    REQUIRE(r.volume.data[i] == expect);
  }
}

TEST_CASE("no defect voxel touches air (1-voxel envelope margin)") {
  PhantomSpec s = base_spec();
  s.pore_density_target = 0.03;
  s.inclusion_density_target = 0.005;
  auto r = phantom::generate_phantom(s);
  const auto [nz, ny, nx] = r.labels.shape;
  auto at = [&](int z, int y, int x) -> uint8_t {
    if (z < 0 || z >= nz || y < 0 || y >= ny || x < 0 || x >= nx) {
      return static_cast<uint8_t>(VoxClass::air);
    }
    return r.labels.at(z, y, x);
  };
  for (int z = 0; z < nz; ++z) {
    for (int y = 0; y < ny; ++y) {
      for (int x = 0; x < nx; ++x) {
        const auto c = at(z, y, x);
        if (c != static_cast<uint8_t>(VoxClass::pore) &&
            c != static_cast<uint8_t>(VoxClass::inclusion)) {
          continue;
        }
        const uint8_t air = static_cast<uint8_t>(VoxClass::air);
        REQUIRE(at(z - 1, y, x) != air);
        REQUIRE(at(z + 1, y, x) != air);
        REQUIRE(at(z, y - 1, x) != air);
        REQUIRE(at(z, y + 1, x) != air);
        REQUIRE(at(z, y, x - 1) != air);
        REQUIRE(at(z, y, x + 1) != air);
      }
    }
  }
}

TEST_CASE("measured pore density is monotone in the target") {
  double prev = -1.0;
  for (double target : {0.01, 0.02, 0.04}) {
    PhantomSpec s = base_spec();
    s.pore_density_target = target;
    auto r = phantom::generate_phantom(s);
    const double d = phantom::defect_volume_density(r.labels, VoxClass::pore);
    CHECK(d >= prev);
    prev = d;
  }
}

TEST_CASE("unreachable density raises an error naming the achievable maximum") {
  PhantomSpec s = base_spec();
  s.grid_shape = {12, 12, 12};
  s.part_shape = PartShape::box({0.3, 0.3, 0.3});  // tiny part, tiny eroded interior
  s.pore_density_target = 0.1;
  s.flaw_r_min = 2.0;
  s.flaw_r_max = 3.0;
  try {
    phantom::generate_phantom(s);
    FAIL("expected density infeasible error");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("infeasible") != std::string::npos);
    CHECK(msg.find("achievable") != std::string::npos);
  }
}

TEST_CASE("spec invariants are enforced") {
  PhantomSpec s = base_spec();
  s.mu_inclusion = 0.01;  // must exceed mu_material
  CHECK_THROWS_AS(phantom::generate_phantom(s), ConfigError);

  s = base_spec();
  s.pore_density_target = 0.2;  // outside [0, 0.1]
  CHECK_THROWS_AS(phantom::generate_phantom(s), ConfigError);

  s = base_spec();
  s.inclusion_density_target = 0.06;  // outside [0, 0.05]
  CHECK_THROWS_AS(phantom::generate_phantom(s), ConfigError);

  s = base_spec();
  s.flaw_r_min = 0.5;  // below 1 voxel
  CHECK_THROWS_AS(phantom::generate_phantom(s), ConfigError);
}

TEST_CASE("raw + sidecar persistence round-trips volumes and labels") {
  PhantomSpec s = base_spec();
  s.grid_shape = {16, 16, 16};
  s.pore_density_target = 0.02;
  auto r = phantom::generate_phantom(s);

  nlohmann::json meta;
  meta["seed"] = s.seed;
  meta["spec"] = s;
  save_volume(r.volume, "/tmp/xct_test_vol", &meta);
  save_labels(r.labels, "/tmp/xct_test_lab", &meta);

  const Volume v = load_volume("/tmp/xct_test_vol");
  CHECK(v.shape == r.volume.shape);
  CHECK(v.data == r.volume.data);
  const LabelVolume l = load_labels("/tmp/xct_test_lab");
  CHECK(l.classes == r.labels.classes);

  std::ifstream side("/tmp/xct_test_vol.json");
  nlohmann::json j;
  side >> j;
  CHECK(j.at("dtype") == "float32");
  CHECK(j.at("class_map").at("pore") == 2);
  CHECK(j.at("seed") == 7);
  CHECK(j.at("spec").at("mu_material") == 0.02);
}

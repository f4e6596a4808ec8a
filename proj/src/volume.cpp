#include "xct/volume.hpp"

#include <bit>
#include <fstream>

#include <nlohmann/json.hpp>

namespace xct {

static_assert(std::endian::native == std::endian::little,
              "raw volume format is little-endian");

const char* vox_class_name(VoxClass c) {
  switch (c) {
    case VoxClass::air: return "air";
    case VoxClass::material: return "material";
    case VoxClass::pore: return "pore";
    case VoxClass::inclusion: return "inclusion";
  }
  return "?";
}

VoxClass vox_class_from_name(const std::string& name) {
  for (int i = 0; i < kNumClasses; ++i) {
    if (name == vox_class_name(static_cast<VoxClass>(i))) return static_cast<VoxClass>(i);
  }
  throw ConfigError("unknown voxel class name: " + name);
}

namespace {

nlohmann::json class_map_json() {
  nlohmann::json m;
  for (int i = 0; i < kNumClasses; ++i) m[vox_class_name(static_cast<VoxClass>(i))] = i;
  return m;
}

void write_sidecar(const std::string& path_base, const std::array<int, 3>& shape,
                   double pitch, const char* dtype, const nlohmann::json* meta) {
  nlohmann::json j;
  j["shape"] = shape;
  j["voxel_pitch_um"] = pitch;
  j["dtype"] = dtype;
  j["class_map"] = class_map_json();
  if (meta) {
    for (auto it = meta->begin(); it != meta->end(); ++it) j[it.key()] = it.value();
  }
  std::ofstream f(path_base + ".json");
  if (!f) throw ConfigError("cannot write sidecar: " + path_base + ".json");
  f << j.dump(2) << "\n";
}

nlohmann::json read_sidecar(const std::string& path_base, const char* want_dtype) {
  std::ifstream f(path_base + ".json");
  if (!f) throw ConfigError("missing sidecar: " + path_base + ".json");
  nlohmann::json j;
  f >> j;
  if (j.at("dtype").get<std::string>() != want_dtype) {
    throw ConfigError(path_base + ": dtype " + j.at("dtype").get<std::string>() +
                      ", expected " + want_dtype);
  }
  return j;
}

template <typename T>
void write_raw(const std::string& path, const std::vector<T>& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write: " + path);
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(T)));
}

template <typename T>
void read_raw(const std::string& path, std::vector<T>& data) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read: " + path);
  f.read(reinterpret_cast<char*>(data.data()),
         static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (static_cast<size_t>(f.gcount()) != data.size() * sizeof(T)) {
    throw ConfigError("short read: " + path);
  }
}

}  // namespace

Image slice_image(const Volume& v, int z) {
  if (z < 0 || z >= v.shape[0]) throw ConfigError("slice index out of range");
  Image img(v.shape[1], v.shape[2]);
  const float* s = v.slice(z);
  for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = s[i];
  return img;
}

void save_volume(const Volume& v, const std::string& path_base, const nlohmann::json* meta) {
  write_raw(path_base + ".raw", v.data);
  write_sidecar(path_base, v.shape, v.voxel_pitch_um, "float32", meta);
}

Volume load_volume(const std::string& path_base) {
  auto j = read_sidecar(path_base, "float32");
  auto s = j.at("shape").get<std::array<int, 3>>();
  Volume v(s[0], s[1], s[2], j.at("voxel_pitch_um").get<double>());
  read_raw(path_base + ".raw", v.data);
  return v;
}

void save_labels(const LabelVolume& v, const std::string& path_base, const nlohmann::json* meta) {
  write_raw(path_base + ".raw", v.classes);
  write_sidecar(path_base, v.shape, v.voxel_pitch_um, "uint8", meta);
}

LabelVolume load_labels(const std::string& path_base) {
  auto j = read_sidecar(path_base, "uint8");
  auto s = j.at("shape").get<std::array<int, 3>>();
  LabelVolume v(s[0], s[1], s[2], j.at("voxel_pitch_um").get<double>());
  read_raw(path_base + ".raw", v.classes);
  return v;
}

}  // namespace xct

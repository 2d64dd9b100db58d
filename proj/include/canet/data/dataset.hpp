#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "canet/data/image_io.hpp"
#include "canet/data/synth.hpp"

namespace canet {

inline constexpr int kManifestVersion = 1;

struct DatasetManifest {
  int version = kManifestVersion;
  std::size_t count = 0;
  std::size_t size = 0;
  std::uint64_t base_seed = 0;
  double difficulty = 0;
  std::vector<std::string> ids;

  static std::string image_name(const std::string& id) { return "img_" + id + ".ppm"; }
  static std::string mask_name(const std::string& id) { return "gt_" + id + ".pgm"; }
};

inline std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return buf;
}

inline nlohmann::json to_json(const DatasetManifest& m) {
  return {{"version", m.version}, {"count", m.count},           {"size", m.size},
          {"base_seed", m.base_seed}, {"difficulty", m.difficulty}, {"ids", m.ids}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  m.count = j.at("count").get<std::size_t>();
  m.size = j.at("size").get<std::size_t>();
  m.base_seed = j.at("base_seed").get<std::uint64_t>();
  m.difficulty = j.at("difficulty").get<double>();
  m.ids = j.at("ids").get<std::vector<std::string>>();
  return m;
}

/// Writes img_%05d.ppm / gt_%05d.pgm for seeds base_seed + i and manifest.json.
inline DatasetManifest generate_dataset(const std::filesystem::path& out_dir, std::size_t count, std::size_t size,
                                        std::uint64_t base_seed, double difficulty) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory " + out_dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.count = count;
  m.size = size;
  m.base_seed = base_seed;
  m.difficulty = difficulty;
  for (std::size_t i = 0; i < count; ++i) {
    const auto id = sample_id(i);
    const auto s = synth::synth_sample(base_seed + i, size, difficulty);
    write_ppm(out_dir / DatasetManifest::image_name(id), s.image);
    write_pgm(out_dir / DatasetManifest::mask_name(id), s.mask);
    m.ids.push_back(id);
  }
  write_file(out_dir / "manifest.json", to_json(m).dump(2) + "\n");
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw IoError("missing dataset manifest " + path.string());
  DatasetManifest m;
  try {
    m = manifest_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  if (m.ids.size() != m.count) throw IoError("manifest " + path.string() + ": count does not match ids");
  for (const auto& id : m.ids) {
    for (const auto& f : {DatasetManifest::image_name(id), DatasetManifest::mask_name(id)}) {
      if (!std::filesystem::exists(dir / f)) throw IoError("manifest references missing file " + (dir / f).string());
    }
  }
  return m;
}

struct LabeledImage {
  std::string id;
  Image image;
  Image mask;  // binary
};

inline Image binarize(const Image& m) {
  Image out = m;
  for (auto& v : out.data) v = v >= 0.5 ? 1.0 : 0.0;
  return out;
}

inline std::vector<LabeledImage> load_dataset(const std::filesystem::path& dir) {
  const auto m = load_manifest(dir);
  std::vector<LabeledImage> out;
  out.reserve(m.ids.size());
  for (const auto& id : m.ids) {
    out.push_back({id, read_ppm(dir / DatasetManifest::image_name(id)),
                   binarize(read_pgm(dir / DatasetManifest::mask_name(id)))});
  }
  return out;
}

}  // namespace canet

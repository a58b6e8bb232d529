#pragma once

#include <string>
#include <vector>

#include "unips/render.hpp"
#include "unips/scene.hpp"

namespace unips {

struct SceneRecord {
    std::string dir;  // relative to the dataset root
    uint64_t seed = 0;
    std::string split;  // train | val | test
    std::string projection;
    double focal_mm = 0;  // 0 for orthographic
    int k = 0;
};

struct Manifest {
    std::string root;  // directory holding the scenes (set on load/save)
    uint64_t seed = 0;
    int width = 0, height = 0;
    std::vector<SceneRecord> scenes;

    std::vector<const SceneRecord*> split(const std::string& name) const;
    std::string scene_path(const SceneRecord& rec) const;
};

// Scene directory layout:
//   img_00.png .. img_KK.png   16-bit linear RGB
//   normals.f32                magic "NRM1", u32 H, u32 W, f32 H*W*3
//   mask.png                   8-bit grayscale, 255 = in mask
//   meta.json                  camera, per-image light records, seed
void write_scene_dir(const MultiIllumSet& set, const std::string& dir);
MultiIllumSet read_scene_dir(const std::string& dir);

// Renders config.total_scenes() scenes with derived per-scene seeds,
// writes them under out_dir and returns the manifest (also saved to
// out_dir/manifest.json). Deterministic for a given (config, seed).
Manifest gen_dataset(const GenConfig& config, const std::string& out_dir, uint64_t seed);

Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& manifest, const std::string& path);

// JSON round trip for generation configs (CLI input).
GenConfig gen_config_from_json_file(const std::string& path);
std::string gen_config_to_json(const GenConfig& config);

}  // namespace unips

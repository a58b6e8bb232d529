#pragma once

#include <vector>

#include "unips/scene.hpp"

namespace unips {

// Primary-hit data for a fixed camera; lighting-independent, so a scene's
// K images share one trace.
struct GBuffer {
    int width = 0, height = 0;
    std::vector<uint8_t> mask;      // 1 = surface hit
    std::vector<Vec3> position;     // world hit points
    std::vector<Vec3> normal;       // unit, facing the camera
    std::vector<int> object_index;  // -1 = ground plane
};

GBuffer trace_gbuffer(const SceneSpec& scene, const CameraSpec& camera);

// Shades one lighting rig over a traced g-buffer. Output is linear
// radiance in [0,1], H*W*3 row-major RGB.
std::vector<float> shade(const SceneSpec& scene, const CameraSpec& camera, const GBuffer& gbuf,
                         const LightingRig& rig);

// The rendered multi-illumination stack for one scene.
struct MultiIllumSet {
    int width = 0, height = 0;
    std::vector<std::vector<float>> images;  // K x (H*W*3), linear [0,1]
    std::vector<float> gt_normals;           // H*W*3, camera space
    std::vector<uint8_t> mask;               // H*W
    CameraSpec camera;
    std::vector<LightingRig> rigs;  // per-image records (oracle only)
    uint64_t seed = 0;

    int k() const { return static_cast<int>(images.size()); }
    void validate() const;
};

// Renders image `light_index` of the scene (one rig).
void render(const SceneSpec& scene, const CameraSpec& camera, int light_index,
            std::vector<float>& image, std::vector<float>& gt_normals,
            std::vector<uint8_t>& mask);

// Renders the full K-image stack, tracing the g-buffer once.
MultiIllumSet render_scene(const SceneSpec& scene, const CameraSpec& camera);

// Deterministic first-K subset of a rendered stack (images and their
// light records together).
MultiIllumSet subset_images(const MultiIllumSet& set, int k);

}  // namespace unips

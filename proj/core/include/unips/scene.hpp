#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "unips/camera.hpp"
#include "unips/vec3.hpp"

namespace unips {

enum class PrimitiveType { kSphere, kBox, kTorus, kSuperellipsoid };

const char* primitive_name(PrimitiveType t);

struct Material {
    Vec3 albedo{0.7, 0.7, 0.7};  // components in [0,1]
    double specular = 0.0;       // Blinn-Phong weight
    double shininess = 32.0;
};

struct Primitive {
    PrimitiveType type = PrimitiveType::kSphere;
    Vec3 center;
    Vec3 scale{0.5, 0.5, 0.5};  // radii / half extents; torus: x = major radius
    double minor_ratio = 0.35;  // torus tube radius as a fraction of major
    double exp1 = 1.0;          // superellipsoid exponents
    double exp2 = 1.0;
    Mat3 rotation;              // local-to-world
    Material material;

    double bounding_radius() const;
};

// Propagation direction (from the light into the scene). Shading uses the
// opposite vector; serialized records store the to-light direction, the
// photometric-stereo convention.
struct DirectionalLight {
    Vec3 dir;
    Vec3 intensity{1, 1, 1};
};

struct PointLight {
    Vec3 pos;
    Vec3 intensity{1, 1, 1};
    double falloff = 0.1;  // attenuation 1 / (1 + falloff * d^2)
};

// One lighting condition = everything switched on for a single exposure.
struct LightingRig {
    std::vector<DirectionalLight> directionals;
    std::vector<PointLight> points;
    Vec3 ambient{0, 0, 0};

    bool has_any_light() const {
        return !directionals.empty() || !points.empty() || ambient.max_component() > 0.0;
    }
};

struct SceneSpec {
    std::vector<Primitive> objects;
    bool ground_plane = false;
    double ground_y = 0.0;          // plane y = ground_y, normal (0,-1,0)
    double ground_half_width = 0;   // |x| extent of the ground patch
    double ground_z_min = 0, ground_z_max = 0;
    std::vector<LightingRig> rigs;  // one per rendered image (K of them)
    uint64_t seed = 0;

    void validate() const;
};

// Generation ranges for procedural scenes. Defaults are the desk-scale
// setup; every field can be overridden from a JSON config.
struct GenConfig {
    int image_width = 64;
    int image_height = 64;
    int images_per_scene = 10;

    int min_objects = 1;
    int max_objects = 4;
    std::vector<PrimitiveType> primitives = {PrimitiveType::kSphere, PrimitiveType::kBox,
                                             PrimitiveType::kTorus,
                                             PrimitiveType::kSuperellipsoid};
    double ground_plane_prob = 0.3;

    double albedo_min = 0.15, albedo_max = 0.95;
    double specular_prob = 0.5;
    double specular_min = 0.05, specular_max = 0.35;
    double shininess_min = 16, shininess_max = 128;

    int min_dir_lights = 1, max_dir_lights = 2;
    double light_tilt_min_deg = 5, light_tilt_max_deg = 60;
    double point_light_prob = 0.35;
    double ambient_prob = 0.5;
    double ambient_max = 0.10;

    // camera mixture: ortho_fraction of scenes orthographic (exact count),
    // the rest perspective with a short/long focal split
    double ortho_fraction = 0.0;
    double perspective_short_fraction = 0.73;
    double focal_short_min = 20, focal_short_max = 70;
    double focal_long_min = 70, focal_long_max = 1000;
    double sensor_mm = 36.0;

    double scene_extent = 2.4;  // lateral world width framed at scene depth
    double depth_range = 1.2;   // object center spread along the axis

    int train_scenes = 500, val_scenes = 50, test_scenes = 50;

    void validate() const;
    int total_scenes() const { return train_scenes + val_scenes + test_scenes; }
};

struct SampledScene {
    SceneSpec scene;
    CameraSpec camera;
};

// Deterministic procedural scene for a given seed. When `force_projection`
// is set the camera model is pinned (used for the exact ortho/perspective
// mixture across a dataset); otherwise perspective is drawn.
SampledScene sample_scene(uint64_t seed, const GenConfig& config,
                          std::optional<Projection> force_projection = std::nullopt);

// Nearest primitive hit along the ray. Returns false on miss; otherwise
// fills t, the outward unit normal and the object index (-1 = ground).
bool scene_intersect(const SceneSpec& scene, const Ray& ray, double& t, Vec3& normal,
                     int& object_index);

// Any-hit query for hard shadows, up to t_max.
bool scene_occluded(const SceneSpec& scene, const Ray& ray, double t_max);

}  // namespace unips

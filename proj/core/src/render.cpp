#include "unips/render.hpp"

#include <cmath>

#include "unips/parallel.hpp"

namespace unips {

namespace {
const Material kGroundMaterial{{0.62, 0.60, 0.58}, 0.0, 32.0};

const Material& material_of(const SceneSpec& scene, int object_index) {
    return object_index < 0 ? kGroundMaterial
                            : scene.objects[static_cast<size_t>(object_index)].material;
}

double shadow_bias(const Vec3& p) { return 1e-7 * (1.0 + p.norm()); }
}  // namespace

GBuffer trace_gbuffer(const SceneSpec& scene, const CameraSpec& camera) {
    camera.validate();
    scene.validate();
    GBuffer g;
    g.width = camera.width;
    g.height = camera.height;
    const size_t n = static_cast<size_t>(g.width) * g.height;
    g.mask.assign(n, 0);
    g.position.assign(n, Vec3{});
    g.normal.assign(n, Vec3{});
    g.object_index.assign(n, -2);

    parallel_for(g.height, [&](int64_t row) {
        for (int col = 0; col < g.width; ++col) {
            const size_t idx = static_cast<size_t>(row) * g.width + col;
            const Ray ray = camera_ray(camera, col, static_cast<double>(row));
            double t;
            Vec3 normal;
            int obj;
            if (!scene_intersect(scene, ray, t, normal, obj)) continue;
            if (normal.dot(ray.dir) > 0) normal = -normal;  // face the camera
            g.mask[idx] = 1;
            g.position[idx] = ray.origin + ray.dir * t;
            g.normal[idx] = normal;
            g.object_index[idx] = obj;
        }
    });
    return g;
}

std::vector<float> shade(const SceneSpec& scene, const CameraSpec& camera, const GBuffer& gbuf,
                         const LightingRig& rig) {
    const size_t n = static_cast<size_t>(gbuf.width) * gbuf.height;
    std::vector<float> image(n * 3, 0.0f);

    parallel_for(gbuf.height, [&](int64_t row) {
        for (int col = 0; col < gbuf.width; ++col) {
            const size_t idx = static_cast<size_t>(row) * gbuf.width + col;
            if (!gbuf.mask[idx]) continue;
            const Vec3& p = gbuf.position[idx];
            const Vec3& normal = gbuf.normal[idx];
            const Material& mat = material_of(scene, gbuf.object_index[idx]);
            const Vec3 to_cam =
                (camera.projection == Projection::kPerspective ? -p : Vec3{0, 0, -1})
                    .normalized();

            Vec3 radiance = rig.ambient * mat.albedo;
            const Vec3 shadow_origin = p + normal * shadow_bias(p);

            for (const auto& dl : rig.directionals) {
                const Vec3 to_light = -dl.dir.normalized();
                const double ndotl = normal.dot(to_light);
                if (ndotl <= 0) continue;
                if (scene_occluded(scene, {shadow_origin, to_light}, 1e300)) continue;
                radiance += mat.albedo * dl.intensity * ndotl;
                if (mat.specular > 0) {
                    const Vec3 h = (to_light + to_cam).normalized();
                    const double ndoth = normal.dot(h);
                    if (ndoth > 0) {
                        radiance += dl.intensity *
                                    (mat.specular * std::pow(ndoth, mat.shininess));
                    }
                }
            }
            for (const auto& pl : rig.points) {
                const Vec3 delta = pl.pos - p;
                const double dist = delta.norm();
                if (dist < 1e-12) continue;
                const Vec3 to_light = delta / dist;
                const double ndotl = normal.dot(to_light);
                if (ndotl <= 0) continue;
                if (scene_occluded(scene, {shadow_origin, to_light}, dist)) continue;
                const double atten = 1.0 / (1.0 + pl.falloff * dist * dist);
                radiance += mat.albedo * pl.intensity * (ndotl * atten);
                if (mat.specular > 0) {
                    const Vec3 h = (to_light + to_cam).normalized();
                    const double ndoth = normal.dot(h);
                    if (ndoth > 0) {
                        radiance += pl.intensity *
                                    (mat.specular * std::pow(ndoth, mat.shininess) * atten);
                    }
                }
            }

            if (!std::isfinite(radiance.x) || !std::isfinite(radiance.y) ||
                !std::isfinite(radiance.z)) {
                throw Error("renderer produced non-finite radiance");
            }
            image[idx * 3 + 0] = static_cast<float>(std::clamp(radiance.x, 0.0, 1.0));
            image[idx * 3 + 1] = static_cast<float>(std::clamp(radiance.y, 0.0, 1.0));
            image[idx * 3 + 2] = static_cast<float>(std::clamp(radiance.z, 0.0, 1.0));
        }
    });
    return image;
}

void MultiIllumSet::validate() const {
    if (images.empty()) throw ContractError("multi-illum set: K must be >= 1");
    const size_t n = static_cast<size_t>(width) * height;
    if (mask.size() != n || gt_normals.size() != n * 3) {
        throw ContractError("multi-illum set: buffer sizes inconsistent with H*W");
    }
    for (const auto& img : images) {
        if (img.size() != n * 3) throw ContractError("multi-illum set: image size mismatch");
    }
    if (rigs.size() != images.size()) {
        throw ContractError("multi-illum set: rig count must match image count");
    }
    for (size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        const double nx = gt_normals[i * 3], ny = gt_normals[i * 3 + 1],
                     nz = gt_normals[i * 3 + 2];
        const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
        if (std::fabs(len - 1.0) > 1e-4) {
            throw ContractError(cat("multi-illum set: non-unit normal at pixel ", i,
                                    " (|n| = ", len, ")"));
        }
    }
}

void render(const SceneSpec& scene, const CameraSpec& camera, int light_index,
            std::vector<float>& image, std::vector<float>& gt_normals,
            std::vector<uint8_t>& mask) {
    if (light_index < 0 || light_index >= static_cast<int>(scene.rigs.size())) {
        throw ContractError(cat("render: light index ", light_index, " outside [0,",
                                scene.rigs.size(), ")"));
    }
    const GBuffer g = trace_gbuffer(scene, camera);
    image = shade(scene, camera, g, scene.rigs[static_cast<size_t>(light_index)]);
    const size_t n = g.mask.size();
    gt_normals.assign(n * 3, 0.0f);
    for (size_t i = 0; i < n; ++i) {
        if (!g.mask[i]) continue;
        gt_normals[i * 3 + 0] = static_cast<float>(g.normal[i].x);
        gt_normals[i * 3 + 1] = static_cast<float>(g.normal[i].y);
        gt_normals[i * 3 + 2] = static_cast<float>(g.normal[i].z);
    }
    mask = g.mask;
}

MultiIllumSet subset_images(const MultiIllumSet& set, int k) {
    if (k <= 0 || k > set.k()) {
        throw ContractError(cat("subset_images: K=", k, " outside [1,", set.k(), "]"));
    }
    MultiIllumSet out = set;
    out.images.resize(static_cast<size_t>(k));
    out.rigs.resize(static_cast<size_t>(k));
    return out;
}

MultiIllumSet render_scene(const SceneSpec& scene, const CameraSpec& camera) {
    MultiIllumSet set;
    set.width = camera.width;
    set.height = camera.height;
    set.camera = camera;
    set.rigs = scene.rigs;
    set.seed = scene.seed;

    const GBuffer g = trace_gbuffer(scene, camera);
    set.mask = g.mask;
    const size_t n = g.mask.size();
    set.gt_normals.assign(n * 3, 0.0f);
    for (size_t i = 0; i < n; ++i) {
        if (!g.mask[i]) continue;
        set.gt_normals[i * 3 + 0] = static_cast<float>(g.normal[i].x);
        set.gt_normals[i * 3 + 1] = static_cast<float>(g.normal[i].y);
        set.gt_normals[i * 3 + 2] = static_cast<float>(g.normal[i].z);
    }
    set.images.reserve(scene.rigs.size());
    for (const auto& rig : scene.rigs) {
        set.images.push_back(shade(scene, camera, g, rig));
    }
    set.validate();
    return set;
}

}  // namespace unips

#include "unips/scene.hpp"

#include <cmath>
#include <random>

namespace unips {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kFrameMargin = 1.08;  // frustum slack around the scene box

double deg2rad(double d) { return d * kPi / 180.0; }
}  // namespace

const char* primitive_name(PrimitiveType t) {
    switch (t) {
        case PrimitiveType::kSphere: return "sphere";
        case PrimitiveType::kBox: return "box";
        case PrimitiveType::kTorus: return "torus";
        case PrimitiveType::kSuperellipsoid: return "superellipsoid";
    }
    return "unknown";
}

double Primitive::bounding_radius() const {
    switch (type) {
        case PrimitiveType::kSphere: return scale.x;
        case PrimitiveType::kTorus: return scale.x * (1.0 + minor_ratio);
        default: return scale.norm();  // box corner bounds the superellipsoid too
    }
}

void SceneSpec::validate() const {
    if (objects.empty() && !ground_plane) throw ConfigError("scene: no geometry");
    for (const auto& rig : rigs) {
        if (!rig.has_any_light()) throw ConfigError("scene: rig with no light source");
    }
    for (const auto& obj : objects) {
        const auto& a = obj.material.albedo;
        if (a.x < 0 || a.x > 1 || a.y < 0 || a.y > 1 || a.z < 0 || a.z > 1) {
            throw ConfigError("scene: albedo component outside [0,1]");
        }
    }
}

void GenConfig::validate() const {
    if (primitives.empty()) throw ConfigError("gen config: empty primitive set");
    if (min_objects < 1 || max_objects < min_objects) {
        throw ConfigError("gen config: degenerate object count range");
    }
    if (images_per_scene < 1) throw ConfigError("gen config: images_per_scene < 1");
    if (focal_short_min >= focal_short_max || focal_long_min > focal_long_max) {
        throw ConfigError("gen config: degenerate focal ranges");
    }
    if (albedo_min > albedo_max || albedo_min < 0 || albedo_max > 1) {
        throw ConfigError("gen config: degenerate albedo range");
    }
    if (ortho_fraction < 0 || ortho_fraction > 1 || perspective_short_fraction < 0 ||
        perspective_short_fraction > 1) {
        throw ConfigError("gen config: fractions must lie in [0,1]");
    }
    if (scene_extent <= 0 || depth_range < 0) throw ConfigError("gen config: bad scene extents");
    if (train_scenes < 0 || val_scenes < 0 || test_scenes < 0 || total_scenes() < 1) {
        throw ConfigError("gen config: no scenes requested");
    }
}

// ---------------------------------------------------------------------------
// Intersection
// ---------------------------------------------------------------------------

namespace {

struct LocalRay {
    Vec3 o, d;  // primitive frame
};

LocalRay to_local(const Primitive& p, const Ray& ray) {
    return {p.rotation.apply_transposed(ray.origin - p.center),
            p.rotation.apply_transposed(ray.dir)};
}

bool sphere_intersect(const Primitive& p, const Ray& ray, double& t, Vec3& n_world) {
    const Vec3 oc = ray.origin - p.center;
    const double r = p.scale.x;
    const double b = oc.dot(ray.dir);
    const double c = oc.dot(oc) - r * r;
    const double disc = b * b - c;
    if (disc < 0) return false;
    const double sq = std::sqrt(disc);
    double th = -b - sq;
    if (th < 1e-9) th = -b + sq;
    if (th < 1e-9) return false;
    t = th;
    n_world = (ray.origin + ray.dir * t - p.center).normalized();
    return true;
}

bool box_intersect(const Primitive& p, const Ray& ray, double& t, Vec3& n_world) {
    const LocalRay lr = to_local(p, ray);
    double tmin = -1e300, tmax = 1e300;
    int axis = -1;
    double axis_sign = 0;
    const double o[3] = {lr.o.x, lr.o.y, lr.o.z};
    const double d[3] = {lr.d.x, lr.d.y, lr.d.z};
    const double h[3] = {p.scale.x, p.scale.y, p.scale.z};
    for (int i = 0; i < 3; ++i) {
        if (std::fabs(d[i]) < 1e-14) {
            if (std::fabs(o[i]) > h[i]) return false;
            continue;
        }
        double t1 = (-h[i] - o[i]) / d[i];
        double t2 = (h[i] - o[i]) / d[i];
        double sign = -1;
        if (t1 > t2) {
            std::swap(t1, t2);
            sign = 1;
        }
        if (t1 > tmin) {
            tmin = t1;
            axis = i;
            axis_sign = sign;
        }
        tmax = std::min(tmax, t2);
        if (tmin > tmax) return false;
    }
    if (axis < 0 || tmin < 1e-9) return false;
    t = tmin;
    Vec3 n_local{0, 0, 0};
    (axis == 0 ? n_local.x : axis == 1 ? n_local.y : n_local.z) = axis_sign;
    n_world = p.rotation.apply(n_local).normalized();
    return true;
}

// Implicit surfaces: uniform scan for the first sign change inside the
// bounding-sphere interval, then bisection down to double precision. The
// normal is the analytic gradient at the refined point.
template <typename F>
bool march_root(const F& f, double t0, double t1, int steps, double& t_hit) {
    double prev_t = t0;
    double prev_v = f(t0);
    if (prev_v <= 0.0) return false;  // starts inside; treat as miss
    const double dt = (t1 - t0) / steps;
    for (int i = 1; i <= steps; ++i) {
        const double ti = t0 + dt * i;
        const double vi = f(ti);
        if (vi <= 0.0) {
            double lo = prev_t, hi = ti;
            for (int it = 0; it < 80; ++it) {
                const double mid = 0.5 * (lo + hi);
                (f(mid) > 0.0 ? lo : hi) = mid;
            }
            t_hit = 0.5 * (lo + hi);
            return true;
        }
        prev_t = ti;
        prev_v = vi;
    }
    return false;
}

bool bounding_interval(const Primitive& p, const Ray& ray, double& t0, double& t1) {
    const Vec3 oc = ray.origin - p.center;
    const double r = p.bounding_radius();
    const double b = oc.dot(ray.dir);
    const double c = oc.dot(oc) - r * r;
    const double disc = b * b - c;
    if (disc < 0) return false;
    const double sq = std::sqrt(disc);
    t0 = std::max(-b - sq, 1e-9);
    t1 = -b + sq;
    return t1 > t0;
}

double torus_f(const Primitive& p, const Vec3& q) {
    const double big_r = p.scale.x;
    const double small_r = big_r * p.minor_ratio;
    const double ring = std::sqrt(q.x * q.x + q.y * q.y) - big_r;
    return ring * ring + q.z * q.z - small_r * small_r;
}

Vec3 torus_grad(const Primitive& p, const Vec3& q) {
    const double big_r = p.scale.x;
    const double rho = std::sqrt(std::max(q.x * q.x + q.y * q.y, 1e-30));
    const double k = 2.0 * (rho - big_r) / rho;
    return {k * q.x, k * q.y, 2.0 * q.z};
}

double superellipsoid_f(const Primitive& p, const Vec3& q) {
    const double ax = std::fabs(q.x / p.scale.x);
    const double ay = std::fabs(q.y / p.scale.y);
    const double az = std::fabs(q.z / p.scale.z);
    const double s = std::pow(ax, 2.0 / p.exp2) + std::pow(ay, 2.0 / p.exp2);
    return std::pow(s, p.exp2 / p.exp1) + std::pow(az, 2.0 / p.exp1) - 1.0;
}

Vec3 superellipsoid_grad(const Primitive& p, const Vec3& q) {
    const double ax = std::fabs(q.x / p.scale.x);
    const double ay = std::fabs(q.y / p.scale.y);
    const double az = std::fabs(q.z / p.scale.z);
    const double s = std::max(std::pow(ax, 2.0 / p.exp2) + std::pow(ay, 2.0 / p.exp2), 1e-14);
    const double outer = (p.exp2 / p.exp1) * std::pow(s, p.exp2 / p.exp1 - 1.0);
    auto sgn = [](double v) { return v >= 0.0 ? 1.0 : -1.0; };
    const double gx = outer * (2.0 / p.exp2) * std::pow(std::max(ax, 1e-14), 2.0 / p.exp2 - 1.0) *
                      sgn(q.x) / p.scale.x;
    const double gy = outer * (2.0 / p.exp2) * std::pow(std::max(ay, 1e-14), 2.0 / p.exp2 - 1.0) *
                      sgn(q.y) / p.scale.y;
    const double gz = (2.0 / p.exp1) * std::pow(std::max(az, 1e-14), 2.0 / p.exp1 - 1.0) *
                      sgn(q.z) / p.scale.z;
    return {gx, gy, gz};
}

bool implicit_intersect(const Primitive& p, const Ray& ray, double& t, Vec3& n_world) {
    double t0, t1;
    if (!bounding_interval(p, ray, t0, t1)) return false;
    const LocalRay lr = to_local(p, ray);
    const bool is_torus = p.type == PrimitiveType::kTorus;
    auto value = [&](double ti) {
        const Vec3 q = lr.o + lr.d * ti;
        return is_torus ? torus_f(p, q) : superellipsoid_f(p, q);
    };
    double th;
    if (!march_root(value, t0, t1, 160, th)) return false;
    t = th;
    const Vec3 q = lr.o + lr.d * t;
    const Vec3 g = is_torus ? torus_grad(p, q) : superellipsoid_grad(p, q);
    n_world = p.rotation.apply(g).normalized();
    return true;
}

bool primitive_intersect(const Primitive& p, const Ray& ray, double& t, Vec3& n) {
    switch (p.type) {
        case PrimitiveType::kSphere: return sphere_intersect(p, ray, t, n);
        case PrimitiveType::kBox: return box_intersect(p, ray, t, n);
        default: return implicit_intersect(p, ray, t, n);
    }
}

bool ground_intersect(const SceneSpec& scene, const Ray& ray, double& t, Vec3& n) {
    if (!scene.ground_plane || std::fabs(ray.dir.y) < 1e-14) return false;
    const double th = (scene.ground_y - ray.origin.y) / ray.dir.y;
    if (th < 1e-9) return false;
    const Vec3 hit = ray.origin + ray.dir * th;
    if (std::fabs(hit.x) > scene.ground_half_width || hit.z < scene.ground_z_min ||
        hit.z > scene.ground_z_max) {
        return false;
    }
    t = th;
    n = {0, -1, 0};
    return true;
}

}  // namespace

bool scene_intersect(const SceneSpec& scene, const Ray& ray, double& t, Vec3& normal,
                     int& object_index) {
    double best_t = 1e300;
    Vec3 best_n;
    int best_idx = -2;
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        double ti;
        Vec3 ni;
        if (primitive_intersect(scene.objects[i], ray, ti, ni) && ti < best_t) {
            best_t = ti;
            best_n = ni;
            best_idx = static_cast<int>(i);
        }
    }
    double tg;
    Vec3 ng;
    if (ground_intersect(scene, ray, tg, ng) && tg < best_t) {
        best_t = tg;
        best_n = ng;
        best_idx = -1;
    }
    if (best_idx == -2) return false;
    t = best_t;
    normal = best_n;
    object_index = best_idx;
    return true;
}

bool scene_occluded(const SceneSpec& scene, const Ray& ray, double t_max) {
    for (const auto& obj : scene.objects) {
        double ti;
        Vec3 ni;
        if (primitive_intersect(obj, ray, ti, ni) && ti < t_max) return true;
    }
    double tg;
    Vec3 ng;
    if (ground_intersect(scene, ray, tg, ng) && tg < t_max) return true;
    return false;
}

// ---------------------------------------------------------------------------
// Procedural sampling
// ---------------------------------------------------------------------------

namespace {

using Rng = std::mt19937_64;

double uni(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uni_int(Rng& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// to-light direction on a spherical cap around -z (lights sit on the
// camera side of the scene)
Vec3 sample_to_light(Rng& rng, double tilt_min_deg, double tilt_max_deg) {
    const double cos_hi = std::cos(deg2rad(tilt_min_deg));
    const double cos_lo = std::cos(deg2rad(tilt_max_deg));
    const double cos_t = uni(rng, cos_lo, cos_hi);
    const double sin_t = std::sqrt(std::max(0.0, 1.0 - cos_t * cos_t));
    const double phi = uni(rng, 0.0, 2.0 * kPi);
    return {sin_t * std::cos(phi), sin_t * std::sin(phi), -cos_t};
}

Vec3 jittered_intensity(Rng& rng, double lo, double hi) {
    const double base = uni(rng, lo, hi);
    return {base + uni(rng, -0.05, 0.05), base + uni(rng, -0.05, 0.05),
            base + uni(rng, -0.05, 0.05)};
}

Material sample_material(Rng& rng, const GenConfig& cfg) {
    Material m;
    m.albedo = {uni(rng, cfg.albedo_min, cfg.albedo_max), uni(rng, cfg.albedo_min, cfg.albedo_max),
                uni(rng, cfg.albedo_min, cfg.albedo_max)};
    if (uni(rng, 0, 1) < cfg.specular_prob) {
        m.specular = uni(rng, cfg.specular_min, cfg.specular_max);
        m.shininess = uni(rng, cfg.shininess_min, cfg.shininess_max);
    }
    return m;
}

LightingRig sample_rig(Rng& rng, const GenConfig& cfg, double scene_depth, double extent) {
    LightingRig rig;
    const int n_dir = uni_int(rng, cfg.min_dir_lights, cfg.max_dir_lights);
    const double scale = 0.95 / std::max(1, n_dir);
    for (int i = 0; i < n_dir; ++i) {
        DirectionalLight dl;
        dl.dir = -sample_to_light(rng, cfg.light_tilt_min_deg, cfg.light_tilt_max_deg);
        dl.intensity = jittered_intensity(rng, 0.75, 1.05) * scale;
        rig.directionals.push_back(dl);
    }
    if (uni(rng, 0, 1) < cfg.point_light_prob) {
        PointLight pl;
        pl.pos = {uni(rng, -0.8, 0.8) * extent, uni(rng, -0.8, 0.3) * extent,
                  uni(rng, 0.15, 0.7) * scene_depth};
        const double d0 = (Vec3{0, 0, scene_depth} - pl.pos).norm();
        pl.falloff = uni(rng, 0.05, 0.3);
        pl.intensity = jittered_intensity(rng, 0.8, 1.4) * (1.0 + pl.falloff * d0 * d0) * 0.8;
        rig.points.push_back(pl);
    }
    if (uni(rng, 0, 1) < cfg.ambient_prob) {
        const double a = uni(rng, 0.02, cfg.ambient_max);
        rig.ambient = {a, a, a};
    }
    return rig;
}

}  // namespace

SampledScene sample_scene(uint64_t seed, const GenConfig& cfg,
                          std::optional<Projection> force_projection) {
    cfg.validate();
    Rng rng(seed);

    SampledScene out;
    out.scene.seed = seed;

    // camera first: the scene is laid out inside its frustum
    CameraSpec& cam = out.camera;
    cam.width = cfg.image_width;
    cam.height = cfg.image_height;
    cam.sensor_mm = cfg.sensor_mm;
    const bool ortho = force_projection.has_value()
                           ? *force_projection == Projection::kOrthographic
                           : false;
    double center_z;
    if (ortho) {
        cam.projection = Projection::kOrthographic;
        cam.ortho_width = cfg.scene_extent * kFrameMargin;
        center_z = 2.0 * cfg.scene_extent;
        // draw to keep the stream position identical across projections
        (void)uni(rng, 0, 1);
        (void)uni(rng, 0, 1);
    } else {
        cam.projection = Projection::kPerspective;
        const bool short_lens = uni(rng, 0, 1) < cfg.perspective_short_fraction;
        cam.focal_mm = short_lens ? uni(rng, cfg.focal_short_min, cfg.focal_short_max)
                                  : uni(rng, cfg.focal_long_min, cfg.focal_long_max);
        center_z = kFrameMargin * cfg.scene_extent * cam.focal_mm / cam.sensor_mm;
    }
    cam.validate();

    const double aspect = static_cast<double>(cfg.image_height) / cfg.image_width;
    const int n_objects = uni_int(rng, cfg.min_objects, cfg.max_objects);
    for (int i = 0; i < n_objects; ++i) {
        Primitive p;
        p.type = cfg.primitives[static_cast<size_t>(
            uni_int(rng, 0, static_cast<int>(cfg.primitives.size()) - 1))];
        const double z = center_z + uni(rng, -0.5, 0.5) * cfg.depth_range;
        // lateral placement inside the frustum cross-section at this depth
        const double half_w = (cam.projection == Projection::kPerspective
                                   ? z * cam.sensor_mm / cam.focal_mm
                                   : cam.ortho_width) *
                              0.5 / kFrameMargin;
        p.center = {uni(rng, -0.8, 0.8) * half_w, uni(rng, -0.8, 0.8) * half_w * aspect, z};

        const double base = uni(rng, 0.12, 0.30) * cfg.scene_extent;
        switch (p.type) {
            case PrimitiveType::kSphere:
                p.scale = {base, base, base};
                break;
            case PrimitiveType::kTorus:
                p.scale = {base, base, base};
                p.minor_ratio = uni(rng, 0.2, 0.45);
                p.rotation = Mat3::from_euler(uni(rng, 0, 2 * kPi), uni(rng, 0, 2 * kPi),
                                              uni(rng, 0, 2 * kPi));
                break;
            default:
                p.scale = {base * uni(rng, 0.6, 1.2), base * uni(rng, 0.6, 1.2),
                           base * uni(rng, 0.6, 1.2)};
                p.rotation = Mat3::from_euler(uni(rng, 0, 2 * kPi), uni(rng, 0, 2 * kPi),
                                              uni(rng, 0, 2 * kPi));
                if (p.type == PrimitiveType::kSuperellipsoid) {
                    p.exp1 = uni(rng, 0.4, 1.6);
                    p.exp2 = uni(rng, 0.4, 1.6);
                }
                break;
        }
        p.material = sample_material(rng, cfg);
        out.scene.objects.push_back(p);
    }

    if (uni(rng, 0, 1) < cfg.ground_plane_prob) {
        out.scene.ground_plane = true;
        out.scene.ground_y = 0.38 * cfg.scene_extent * aspect;
        out.scene.ground_half_width = cfg.scene_extent * 2.0;
        out.scene.ground_z_min = center_z - 2.0 * cfg.depth_range;
        out.scene.ground_z_max = center_z + 4.0 * cfg.depth_range;
    }

    for (int k = 0; k < cfg.images_per_scene; ++k) {
        out.scene.rigs.push_back(sample_rig(rng, cfg, center_z, cfg.scene_extent));
    }

    out.scene.validate();
    return out;
}

}  // namespace unips

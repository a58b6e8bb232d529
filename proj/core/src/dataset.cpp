#include "unips/dataset.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <mutex>
#include <fstream>

#include "unips/image_io.hpp"
#include "unips/parallel.hpp"

namespace unips {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json vec3_to_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

Vec3 vec3_from_json(const json& j) { return {j.at(0), j.at(1), j.at(2)}; }

json rig_to_json(const LightingRig& rig) {
    json j;
    j["ambient"] = vec3_to_json(rig.ambient);
    j["directional"] = json::array();
    for (const auto& dl : rig.directionals) {
        // serialized as the to-light direction (photometric-stereo convention)
        j["directional"].push_back(
            {{"to_light", vec3_to_json(-dl.dir)}, {"intensity", vec3_to_json(dl.intensity)}});
    }
    j["point"] = json::array();
    for (const auto& pl : rig.points) {
        j["point"].push_back({{"pos", vec3_to_json(pl.pos)},
                              {"intensity", vec3_to_json(pl.intensity)},
                              {"falloff", pl.falloff}});
    }
    return j;
}

LightingRig rig_from_json(const json& j) {
    LightingRig rig;
    rig.ambient = vec3_from_json(j.at("ambient"));
    for (const auto& d : j.at("directional")) {
        DirectionalLight dl;
        dl.dir = -vec3_from_json(d.at("to_light"));
        dl.intensity = vec3_from_json(d.at("intensity"));
        rig.directionals.push_back(dl);
    }
    for (const auto& p : j.at("point")) {
        PointLight pl;
        pl.pos = vec3_from_json(p.at("pos"));
        pl.intensity = vec3_from_json(p.at("intensity"));
        pl.falloff = p.at("falloff");
        rig.points.push_back(pl);
    }
    return rig;
}

json camera_to_json(const CameraSpec& cam) {
    json j;
    j["projection"] = projection_name(cam.projection);
    j["focal_mm"] = cam.focal_mm;
    j["sensor_mm"] = cam.sensor_mm;
    j["ortho_width"] = cam.ortho_width;
    j["width"] = cam.width;
    j["height"] = cam.height;
    return j;
}

CameraSpec camera_from_json(const json& j) {
    CameraSpec cam;
    cam.projection = j.at("projection") == "orthographic" ? Projection::kOrthographic
                                                          : Projection::kPerspective;
    cam.focal_mm = j.at("focal_mm");
    cam.sensor_mm = j.at("sensor_mm");
    cam.ortho_width = j.at("ortho_width");
    cam.width = j.at("width");
    cam.height = j.at("height");
    return cam;
}

std::string image_name(int k) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%02d.png", k);
    return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(cat("cannot open ", path, " for writing"));
    out << content;
    if (!out) throw IoError(cat("short write to ", path));
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(cat("missing file: ", path));
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

// Even spread of `count` picks over `total` slots (exact counting).
bool bresenham_pick(int index, int count, int total) {
    const int64_t a = static_cast<int64_t>(index + 1) * count / total;
    const int64_t b = static_cast<int64_t>(index) * count / total;
    return a > b;
}

}  // namespace

std::vector<const SceneRecord*> Manifest::split(const std::string& name) const {
    std::vector<const SceneRecord*> out;
    for (const auto& rec : scenes) {
        if (rec.split == name) out.push_back(&rec);
    }
    return out;
}

std::string Manifest::scene_path(const SceneRecord& rec) const {
    return (fs::path(root) / rec.dir).string();
}

void write_scene_dir(const MultiIllumSet& set, const std::string& dir) {
    set.validate();
    fs::create_directories(dir);
    const fs::path base(dir);
    for (int k = 0; k < set.k(); ++k) {
        write_png16_rgb((base / image_name(k)).string(), set.images[static_cast<size_t>(k)].data(),
                        set.width, set.height);
    }
    write_f32_blob((base / "normals.f32").string(), "NRM1",
                   {static_cast<uint32_t>(set.height), static_cast<uint32_t>(set.width)},
                   set.gt_normals.data(), set.gt_normals.size());
    std::vector<uint8_t> mask255(set.mask.size());
    for (size_t i = 0; i < set.mask.size(); ++i) mask255[i] = set.mask[i] ? 255 : 0;
    write_png8_gray((base / "mask.png").string(), mask255.data(), set.width, set.height);

    json meta;
    meta["seed"] = set.seed;
    meta["k"] = set.k();
    meta["camera"] = camera_to_json(set.camera);
    meta["rigs"] = json::array();
    for (const auto& rig : set.rigs) meta["rigs"].push_back(rig_to_json(rig));
    write_text_file((base / "meta.json").string(), meta.dump(2) + "\n");
}

MultiIllumSet read_scene_dir(const std::string& dir) {
    const fs::path base(dir);
    MultiIllumSet set;

    json meta;
    try {
        meta = json::parse(read_text_file((base / "meta.json").string()));
    } catch (const json::exception& e) {
        throw IoError(cat(dir, "/meta.json: parse error: ", e.what()));
    }
    set.seed = meta.at("seed");
    set.camera = camera_from_json(meta.at("camera"));
    const int k = meta.at("k");
    for (const auto& rj : meta.at("rigs")) set.rigs.push_back(rig_from_json(rj));

    std::vector<uint32_t> dims;
    std::vector<float> normals = read_f32_blob((base / "normals.f32").string(), "NRM1", 2, dims);
    set.height = static_cast<int>(dims[0]);
    set.width = static_cast<int>(dims[1]);
    if (normals.size() != static_cast<size_t>(set.width) * set.height * 3) {
        throw IoError(cat(dir, "/normals.f32: payload size mismatch"));
    }
    set.gt_normals = std::move(normals);

    int mw, mh;
    std::vector<uint8_t> mask255 = read_png8_gray((base / "mask.png").string(), mw, mh);
    if (mw != set.width || mh != set.height) {
        throw IoError(cat(dir, "/mask.png: size mismatch with normals.f32"));
    }
    set.mask.resize(mask255.size());
    for (size_t i = 0; i < mask255.size(); ++i) set.mask[i] = mask255[i] >= 128 ? 1 : 0;

    for (int i = 0; i < k; ++i) {
        int iw, ih;
        std::vector<float> img = read_png16_rgb((base / image_name(i)).string(), iw, ih);
        if (iw != set.width || ih != set.height) {
            throw IoError(cat(dir, "/", image_name(i), ": size mismatch"));
        }
        set.images.push_back(std::move(img));
    }
    set.validate();
    return set;
}

Manifest gen_dataset(const GenConfig& config, const std::string& out_dir, uint64_t seed) {
    config.validate();
    fs::create_directories(out_dir);

    const int total = config.total_scenes();
    const int ortho_count = static_cast<int>(std::llround(config.ortho_fraction * total));

    Manifest manifest;
    manifest.root = out_dir;
    manifest.seed = seed;
    manifest.width = config.image_width;
    manifest.height = config.image_height;
    manifest.scenes.resize(static_cast<size_t>(total));

    std::vector<SampledScene> sampled(static_cast<size_t>(total));
    for (int i = 0; i < total; ++i) {
        const uint64_t scene_seed = derive_seed(seed, static_cast<uint64_t>(i));
        const bool ortho = bresenham_pick(i, ortho_count, total);
        sampled[static_cast<size_t>(i)] =
            sample_scene(scene_seed, config,
                         ortho ? std::optional<Projection>(Projection::kOrthographic)
                               : std::optional<Projection>(Projection::kPerspective));
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%04d", i);
        auto& rec = manifest.scenes[static_cast<size_t>(i)];
        rec.dir = name;
        rec.seed = scene_seed;
        rec.split = i < config.train_scenes ? "train"
                    : i < config.train_scenes + config.val_scenes ? "val"
                                                                  : "test";
        rec.projection = projection_name(sampled[static_cast<size_t>(i)].camera.projection);
        rec.focal_mm = sampled[static_cast<size_t>(i)].camera.projection ==
                               Projection::kPerspective
                           ? sampled[static_cast<size_t>(i)].camera.focal_mm
                           : 0.0;
        rec.k = config.images_per_scene;
    }

    // rendering is pure per scene; the manifest write below is serial
    std::exception_ptr first_error;
    std::mutex error_mutex;
    parallel_for(total, [&](int64_t i) {
        try {
            const auto& s = sampled[static_cast<size_t>(i)];
            MultiIllumSet set = render_scene(s.scene, s.camera);
            write_scene_dir(set, manifest.scene_path(manifest.scenes[static_cast<size_t>(i)]));
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
        }
    });
    if (first_error) std::rethrow_exception(first_error);

    save_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
    return manifest;
}

void save_manifest(const Manifest& manifest, const std::string& path) {
    json j;
    j["seed"] = manifest.seed;
    j["width"] = manifest.width;
    j["height"] = manifest.height;
    j["scenes"] = json::array();
    for (const auto& rec : manifest.scenes) {
        j["scenes"].push_back({{"dir", rec.dir},
                               {"seed", rec.seed},
                               {"split", rec.split},
                               {"projection", rec.projection},
                               {"focal_mm", rec.focal_mm},
                               {"k", rec.k}});
    }
    write_text_file(path, j.dump(2) + "\n");
}

Manifest load_manifest(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw IoError(cat(path, ": parse error: ", e.what()));
    }
    Manifest m;
    m.root = fs::path(path).parent_path().string();
    m.seed = j.at("seed");
    m.width = j.at("width");
    m.height = j.at("height");
    for (const auto& sj : j.at("scenes")) {
        SceneRecord rec;
        rec.dir = sj.at("dir");
        rec.seed = sj.at("seed");
        rec.split = sj.at("split");
        rec.projection = sj.at("projection");
        rec.focal_mm = sj.at("focal_mm");
        rec.k = sj.at("k");
        m.scenes.push_back(std::move(rec));
    }
    return m;
}

GenConfig gen_config_from_json_file(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw IoError(cat(path, ": parse error: ", e.what()));
    }
    GenConfig c;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("image_width", c.image_width);
    get("image_height", c.image_height);
    get("images_per_scene", c.images_per_scene);
    get("min_objects", c.min_objects);
    get("max_objects", c.max_objects);
    get("ground_plane_prob", c.ground_plane_prob);
    get("albedo_min", c.albedo_min);
    get("albedo_max", c.albedo_max);
    get("specular_prob", c.specular_prob);
    get("specular_min", c.specular_min);
    get("specular_max", c.specular_max);
    get("shininess_min", c.shininess_min);
    get("shininess_max", c.shininess_max);
    get("min_dir_lights", c.min_dir_lights);
    get("max_dir_lights", c.max_dir_lights);
    get("light_tilt_min_deg", c.light_tilt_min_deg);
    get("light_tilt_max_deg", c.light_tilt_max_deg);
    get("point_light_prob", c.point_light_prob);
    get("ambient_prob", c.ambient_prob);
    get("ambient_max", c.ambient_max);
    get("ortho_fraction", c.ortho_fraction);
    get("perspective_short_fraction", c.perspective_short_fraction);
    get("focal_short_min", c.focal_short_min);
    get("focal_short_max", c.focal_short_max);
    get("focal_long_min", c.focal_long_min);
    get("focal_long_max", c.focal_long_max);
    get("sensor_mm", c.sensor_mm);
    get("scene_extent", c.scene_extent);
    get("depth_range", c.depth_range);
    get("train_scenes", c.train_scenes);
    get("val_scenes", c.val_scenes);
    get("test_scenes", c.test_scenes);
    if (j.contains("primitives")) {
        c.primitives.clear();
        for (const auto& name : j.at("primitives")) {
            const std::string s = name;
            if (s == "sphere") c.primitives.push_back(PrimitiveType::kSphere);
            else if (s == "box") c.primitives.push_back(PrimitiveType::kBox);
            else if (s == "torus") c.primitives.push_back(PrimitiveType::kTorus);
            else if (s == "superellipsoid") c.primitives.push_back(PrimitiveType::kSuperellipsoid);
            else throw ConfigError(cat("unknown primitive '", s, "' in ", path));
        }
    }
    c.validate();
    return c;
}

std::string gen_config_to_json(const GenConfig& c) {
    json j;
    j["image_width"] = c.image_width;
    j["image_height"] = c.image_height;
    j["images_per_scene"] = c.images_per_scene;
    j["min_objects"] = c.min_objects;
    j["max_objects"] = c.max_objects;
    j["ground_plane_prob"] = c.ground_plane_prob;
    j["albedo_min"] = c.albedo_min;
    j["albedo_max"] = c.albedo_max;
    j["specular_prob"] = c.specular_prob;
    j["specular_min"] = c.specular_min;
    j["specular_max"] = c.specular_max;
    j["shininess_min"] = c.shininess_min;
    j["shininess_max"] = c.shininess_max;
    j["min_dir_lights"] = c.min_dir_lights;
    j["max_dir_lights"] = c.max_dir_lights;
    j["light_tilt_min_deg"] = c.light_tilt_min_deg;
    j["light_tilt_max_deg"] = c.light_tilt_max_deg;
    j["point_light_prob"] = c.point_light_prob;
    j["ambient_prob"] = c.ambient_prob;
    j["ambient_max"] = c.ambient_max;
    j["ortho_fraction"] = c.ortho_fraction;
    j["perspective_short_fraction"] = c.perspective_short_fraction;
    j["focal_short_min"] = c.focal_short_min;
    j["focal_short_max"] = c.focal_short_max;
    j["focal_long_min"] = c.focal_long_min;
    j["focal_long_max"] = c.focal_long_max;
    j["sensor_mm"] = c.sensor_mm;
    j["scene_extent"] = c.scene_extent;
    j["depth_range"] = c.depth_range;
    j["train_scenes"] = c.train_scenes;
    j["val_scenes"] = c.val_scenes;
    j["test_scenes"] = c.test_scenes;
    json prims = json::array();
    for (auto t : c.primitives) prims.push_back(primitive_name(t));
    j["primitives"] = prims;
    return j.dump(2) + "\n";
}

}  // namespace unips

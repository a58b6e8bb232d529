#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "unips/dataset.hpp"
#include "unips/eval.hpp"
#include "unips/image_io.hpp"
#include "unips/render.hpp"

using namespace unips;

namespace {

constexpr double kPi = 3.14159265358979323846;

// single Lambertian sphere, no ground, no ambient; the Woodham test bed
SceneSpec lambertian_sphere_scene(const std::vector<Vec3>& to_lights, double albedo = 0.6,
                                  double specular = 0.0) {
    SceneSpec scene;
    Primitive p;
    p.type = PrimitiveType::kSphere;
    p.center = {0.0, 0.0, 3.0};
    p.scale = {0.8, 0.8, 0.8};
    p.material.albedo = {albedo, albedo, albedo};
    p.material.specular = specular;
    p.material.shininess = 48.0;
    scene.objects.push_back(p);
    for (const auto& tl : to_lights) {
        LightingRig rig;
        rig.directionals.push_back({-tl.normalized(), {1.0, 1.0, 1.0}});
        scene.rigs.push_back(rig);
    }
    scene.seed = 1;
    return scene;
}

CameraSpec ortho_camera(int size = 64, double width = 2.5) {
    CameraSpec cam;
    cam.projection = Projection::kOrthographic;
    cam.ortho_width = width;
    cam.width = size;
    cam.height = size;
    return cam;
}

std::vector<Vec3> ring_of_lights(int count, double tilt_deg) {
    std::vector<Vec3> out;
    const double t = tilt_deg * kPi / 180.0;
    for (int i = 0; i < count; ++i) {
        const double phi = 2.0 * kPi * i / count;
        out.push_back({std::sin(t) * std::cos(phi), std::sin(t) * std::sin(phi), -std::cos(t)});
    }
    return out;
}

}  // namespace

TEST_CASE("principal-point ray equals the optical axis") {
    CameraSpec cam;
    cam.projection = Projection::kPerspective;
    cam.focal_mm = 35;
    cam.width = 64;
    cam.height = 48;
    const Ray r = camera_ray(cam, (cam.width - 1) / 2.0, (cam.height - 1) / 2.0);
    CHECK(std::fabs(r.dir.x) < 1e-12);
    CHECK(std::fabs(r.dir.y) < 1e-12);
    CHECK(r.dir.z == doctest::Approx(1.0));
}

TEST_CASE("corner ray angle matches atan(sensor half diagonal / focal)") {
    CameraSpec cam;
    cam.projection = Projection::kPerspective;
    cam.focal_mm = 28;
    cam.sensor_mm = 36;
    cam.width = 64;
    cam.height = 48;
    const Ray r = camera_ray(cam, -0.5, -0.5);
    const double half_diag = 0.5 * std::sqrt(36.0 * 36.0 + 27.0 * 27.0);
    const double expected = std::atan(half_diag / cam.focal_mm);
    const double angle = std::acos(r.dir.z);
    CHECK(std::fabs(angle - expected) < 1e-6);
}

TEST_CASE("camera validation enforces focal range and divisibility") {
    CameraSpec cam;
    cam.focal_mm = 10;
    CHECK_THROWS_AS(cam.validate(), ConfigError);
    cam.focal_mm = 2000;
    CHECK_THROWS_AS(cam.validate(), ConfigError);
    cam.focal_mm = 50;
    cam.width = 60;  // not divisible by 8
    CHECK_THROWS_AS(cam.validate_for_patch(4), ContractError);
    cam.width = 64;
    cam.height = 64;
    CHECK_NOTHROW(cam.validate_for_patch(4));
}

TEST_CASE("sample_scene is deterministic for a fixed seed") {
    GenConfig cfg;
    auto a = sample_scene(7, cfg);
    auto b = sample_scene(7, cfg);
    REQUIRE(a.scene.objects.size() == b.scene.objects.size());
    for (size_t i = 0; i < a.scene.objects.size(); ++i) {
        CHECK(a.scene.objects[i].type == b.scene.objects[i].type);
        CHECK(a.scene.objects[i].center.x == b.scene.objects[i].center.x);
        CHECK(a.scene.objects[i].material.albedo.y == b.scene.objects[i].material.albedo.y);
    }
    REQUIRE(a.scene.rigs.size() == b.scene.rigs.size());
    for (size_t i = 0; i < a.scene.rigs.size(); ++i) {
        REQUIRE(a.scene.rigs[i].directionals.size() == b.scene.rigs[i].directionals.size());
        CHECK(a.scene.rigs[i].directionals[0].dir.x == b.scene.rigs[i].directionals[0].dir.x);
    }
    CHECK(a.camera.focal_mm == b.camera.focal_mm);
}

TEST_CASE("short-focal fraction tracks the configured mixture") {
    GenConfig cfg;
    cfg.perspective_short_fraction = 0.73;
    int short_count = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        auto s = sample_scene(derive_seed(99, i), cfg, Projection::kPerspective);
        if (s.camera.focal_mm < 70.0) ++short_count;
    }
    const double frac = static_cast<double>(short_count) / n;
    CHECK(frac > 0.71);
    CHECK(frac < 0.75);
}

TEST_CASE("constrained sampling: one sphere, one directional light") {
    GenConfig cfg;
    cfg.min_objects = cfg.max_objects = 1;
    cfg.primitives = {PrimitiveType::kSphere};
    cfg.min_dir_lights = cfg.max_dir_lights = 1;
    cfg.point_light_prob = 0.0;
    cfg.ambient_prob = 0.0;
    cfg.ground_plane_prob = 0.0;
    cfg.specular_prob = 0.0;
    auto s = sample_scene(3, cfg);
    REQUIRE(s.scene.objects.size() == 1);
    CHECK(s.scene.objects[0].type == PrimitiveType::kSphere);
    CHECK(!s.scene.ground_plane);
    for (const auto& rig : s.scene.rigs) {
        CHECK(rig.directionals.size() == 1);
        CHECK(rig.points.empty());
        CHECK(rig.ambient.max_component() == 0.0);
    }
}

TEST_CASE("lambertian sphere shading matches the closed form") {
    const Vec3 to_light = Vec3{0.3, -0.2, -0.93}.normalized();
    SceneSpec scene = lambertian_sphere_scene({to_light});
    CameraSpec cam = ortho_camera();

    std::vector<float> image, normals;
    std::vector<uint8_t> mask;
    render(scene, cam, 0, image, normals, mask);

    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> pick(0, cam.width * cam.height - 1);
    int checked = 0;
    while (checked < 100) {
        const int idx = pick(rng);
        if (!mask[static_cast<size_t>(idx)]) continue;
        const int row = idx / cam.width, col = idx % cam.width;
        // analytic sphere normal from the orthographic pixel position
        const Ray r = camera_ray(cam, col, row);
        const double dx = r.origin.x - scene.objects[0].center.x;
        const double dy = r.origin.y - scene.objects[0].center.y;
        const double rr = scene.objects[0].scale.x;
        if (dx * dx + dy * dy > rr * rr - 1e-4) continue;  // skip the limb
        const double dz = -std::sqrt(rr * rr - dx * dx - dy * dy);
        const Vec3 n = Vec3{dx, dy, dz} / rr;
        const double expected = 0.6 * std::max(0.0, n.dot(to_light));
        CHECK(std::fabs(image[static_cast<size_t>(idx) * 3] - expected) < 1e-5);
        // stored gt normal agrees with the analytic one
        CHECK(std::fabs(normals[static_cast<size_t>(idx) * 3 + 0] - n.x) < 1e-4);
        CHECK(std::fabs(normals[static_cast<size_t>(idx) * 3 + 2] - n.z) < 1e-4);
        ++checked;
    }
}

TEST_CASE("light behind the object leaves only ambient") {
    const Vec3 behind = Vec3{0.0, 0.0, 1.0};  // to-light straight into the scene
    SceneSpec scene = lambertian_sphere_scene({behind});
    scene.rigs[0].ambient = {0.05, 0.05, 0.05};
    CameraSpec cam = ortho_camera();
    std::vector<float> image, normals;
    std::vector<uint8_t> mask;
    render(scene, cam, 0, image, normals, mask);
    for (size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        CHECK(image[i * 3] == doctest::Approx(0.05 * 0.6).epsilon(1e-5));
    }
}

TEST_CASE("perspective 20mm sees a second cube face, 1000mm does not") {
    auto spread_for_focal = [](double focal) {
        SceneSpec scene;
        Primitive cube;
        cube.type = PrimitiveType::kBox;
        const double z = 1.08 * 2.4 * focal / 36.0;
        const double half_w = z * 36.0 / focal * 0.5 / 1.08;
        cube.center = {0.65 * half_w, 0.0, z};
        const double s = 0.22 * half_w;
        cube.scale = {s, s, s};
        scene.objects.push_back(cube);
        LightingRig rig;
        rig.directionals.push_back({Vec3{0, 0, 1}, {1, 1, 1}});
        scene.rigs.push_back(rig);

        CameraSpec cam;
        cam.projection = Projection::kPerspective;
        cam.focal_mm = focal;
        cam.width = cam.height = 96;

        std::vector<float> image, normals;
        std::vector<uint8_t> mask;
        render(scene, cam, 0, image, normals, mask);
        // max pairwise angle between visible normals
        double max_angle = 0.0;
        Vec3 first;
        bool have_first = false;
        for (size_t i = 0; i < mask.size(); ++i) {
            if (!mask[i]) continue;
            const Vec3 n{normals[i * 3], normals[i * 3 + 1], normals[i * 3 + 2]};
            if (!have_first) {
                first = n;
                have_first = true;
            } else {
                max_angle = std::max(max_angle, std::acos(std::clamp(n.dot(first), -1.0, 1.0)));
            }
        }
        return max_angle;
    };

    CHECK(spread_for_focal(20.0) > 0.5);      // two faces, ~90 degrees apart
    CHECK(spread_for_focal(1000.0) <= 1e-3);  // effectively orthographic
}

TEST_CASE("woodham inversion on a noiseless lambertian sphere") {
    SceneSpec scene = lambertian_sphere_scene(ring_of_lights(4, 35.0));
    CameraSpec cam = ortho_camera();
    MultiIllumSet set = render_scene(scene, cam);

    WoodhamResult w = woodham_baseline(set);
    std::vector<uint8_t> both(set.mask.size());
    int valid_count = 0;
    for (size_t i = 0; i < both.size(); ++i) {
        both[i] = set.mask[i] && w.valid[i];
        valid_count += both[i];
    }
    REQUIRE(valid_count > 500);
    const double mae = mae_degrees(w.normals, set.gt_normals, both);
    CHECK(mae < 0.1);
}

TEST_CASE("woodham flags rank deficiency when lights share a plane") {
    // to-light directions all in the yz-plane: x-component unobservable
    std::vector<Vec3> lights = {Vec3{0, 0.5, -0.87}, Vec3{0, -0.5, -0.87}, Vec3{0, 0.3, -0.95},
                                Vec3{0, -0.2, -0.98}};
    SceneSpec scene = lambertian_sphere_scene(lights);
    CameraSpec cam = ortho_camera();
    MultiIllumSet set = render_scene(scene, cam);
    WoodhamResult w = woodham_baseline(set);
    for (size_t i = 0; i < w.valid.size(); ++i) CHECK(!w.valid[i]);
}

TEST_CASE("specular highlights degrade the lambertian inversion") {
    CameraSpec cam = ortho_camera();
    auto lights = ring_of_lights(4, 35.0);

    MultiIllumSet clean = render_scene(lambertian_sphere_scene(lights, 0.6, 0.0), cam);
    MultiIllumSet shiny = render_scene(lambertian_sphere_scene(lights, 0.6, 0.35), cam);

    auto run = [](const MultiIllumSet& set) {
        WoodhamResult w = woodham_baseline(set);
        std::vector<uint8_t> both(set.mask.size());
        for (size_t i = 0; i < both.size(); ++i) both[i] = set.mask[i] && w.valid[i];
        return mae_degrees(w.normals, set.gt_normals, both);
    };
    CHECK(run(shiny) > run(clean));
}

TEST_CASE("woodham rejects sets without single-directional rigs") {
    SceneSpec scene = lambertian_sphere_scene(ring_of_lights(2, 30.0));
    CameraSpec cam = ortho_camera();
    MultiIllumSet set = render_scene(scene, cam);
    CHECK_THROWS_AS(woodham_baseline(set), ContractError);  // K = 2 < 3
}

TEST_CASE("scene round trip: normals bit-exact, images within quantization") {
    GenConfig cfg;
    cfg.train_scenes = 1;
    cfg.val_scenes = 0;
    cfg.test_scenes = 0;
    auto s = sample_scene(42, cfg);
    MultiIllumSet set = render_scene(s.scene, s.camera);

    const std::string dir = "/tmp/unips_scene_rt";
    std::filesystem::remove_all(dir);
    write_scene_dir(set, dir);
    MultiIllumSet loaded = read_scene_dir(dir);

    CHECK(loaded.k() == set.k());
    CHECK(loaded.gt_normals == set.gt_normals);  // f32 raw, bit-exact
    CHECK(loaded.mask == set.mask);
    for (int k = 0; k < set.k(); ++k) {
        const auto& a = set.images[static_cast<size_t>(k)];
        const auto& b = loaded.images[static_cast<size_t>(k)];
        REQUIRE(a.size() == b.size());
        float max_err = 0;
        for (size_t i = 0; i < a.size(); ++i) max_err = std::max(max_err, std::fabs(a[i] - b[i]));
        CHECK(max_err <= 1.0f / 65535.0f);
    }
    // light records round trip exactly (doubles through JSON)
    REQUIRE(loaded.rigs.size() == set.rigs.size());
    for (size_t i = 0; i < set.rigs.size(); ++i) {
        REQUIRE(loaded.rigs[i].directionals.size() == set.rigs[i].directionals.size());
        for (size_t d = 0; d < set.rigs[i].directionals.size(); ++d) {
            CHECK(loaded.rigs[i].directionals[d].dir.x == set.rigs[i].directionals[d].dir.x);
            CHECK(loaded.rigs[i].directionals[d].intensity.z ==
                  set.rigs[i].directionals[d].intensity.z);
        }
    }
}

TEST_CASE("read_scene_dir names the missing file") {
    const std::string dir = "/tmp/unips_scene_missing";
    std::filesystem::remove_all(dir);
    GenConfig cfg;
    auto s = sample_scene(43, cfg);
    MultiIllumSet set = render_scene(s.scene, s.camera);
    write_scene_dir(set, dir);
    std::filesystem::remove(dir + "/normals.f32");
    try {
        read_scene_dir(dir);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("normals.f32") != std::string::npos);
    }
}

TEST_CASE("gen_dataset writes scenes, splits, and a deterministic manifest") {
    GenConfig cfg;
    cfg.train_scenes = 6;
    cfg.val_scenes = 2;
    cfg.test_scenes = 2;
    cfg.images_per_scene = 10;
    cfg.image_width = cfg.image_height = 16;
    cfg.ortho_fraction = 0.3;

    const std::string dir_a = "/tmp/unips_ds_a";
    const std::string dir_b = "/tmp/unips_ds_b";
    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);

    Manifest m = gen_dataset(cfg, dir_a, 1234);
    REQUIRE(m.scenes.size() == 10);
    CHECK(m.split("train").size() == 6);
    CHECK(m.split("val").size() == 2);
    CHECK(m.split("test").size() == 2);

    int ortho = 0;
    for (const auto& rec : m.scenes) {
        if (rec.projection == "orthographic") ++ortho;
        CHECK(std::filesystem::exists(m.scene_path(rec) + "/img_09.png"));
        CHECK(!std::filesystem::exists(m.scene_path(rec) + "/img_10.png"));
    }
    CHECK(ortho == 3);

    gen_dataset(cfg, dir_b, 1234);
    std::ifstream fa(dir_a + "/manifest.json"), fb(dir_b + "/manifest.json");
    std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
}

TEST_CASE("mask consistency: in-mask normals finite, out-of-mask radiance zero") {
    GenConfig cfg;
    cfg.ground_plane_prob = 0.0;
    auto s = sample_scene(77, cfg);
    MultiIllumSet set = render_scene(s.scene, s.camera);
    for (size_t i = 0; i < set.mask.size(); ++i) {
        if (set.mask[i]) {
            for (int c = 0; c < 3; ++c) CHECK(std::isfinite(set.gt_normals[i * 3 + c]));
        } else {
            for (const auto& img : set.images) {
                CHECK(img[i * 3] == 0.0f);
                CHECK(img[i * 3 + 1] == 0.0f);
                CHECK(img[i * 3 + 2] == 0.0f);
            }
        }
    }
}

TEST_CASE("mae: identity, antipodal, and a 90-degree rotation") {
    const size_t n = 8;
    std::vector<float> gt(n * 3, 0.0f);
    for (size_t i = 0; i < n; ++i) gt[i * 3 + 2] = -1.0f;  // facing the camera
    std::vector<uint8_t> mask(n, 1);

    CHECK(mae_degrees(gt, gt, mask) == doctest::Approx(0.0));

    std::vector<float> anti(n * 3, 0.0f);
    for (size_t i = 0; i < n; ++i) anti[i * 3 + 2] = 1.0f;
    CHECK(mae_degrees(anti, gt, mask) == doctest::Approx(180.0));

    // rotate 90 degrees about x: (0,0,-1) -> (0,-1,0)
    std::vector<float> rot(n * 3, 0.0f);
    for (size_t i = 0; i < n; ++i) rot[i * 3 + 1] = -1.0f;
    CHECK(mae_degrees(rot, gt, mask) == doctest::Approx(90.0));

    std::vector<uint8_t> empty_mask(n, 0);
    CHECK_THROWS_AS(mae_degrees(gt, gt, empty_mask), ContractError);
}

TEST_CASE("normal png export: mapping and round trip") {
    std::vector<float> normals = {0, 0, -1, 1, 0, 0};
    const std::string path = "/tmp/unips_normals.png";
    export_normal_png(normals, 2, 1, path);
    int w, h;
    std::vector<uint8_t> rgb = read_png8_rgb(path, w, h);
    REQUIRE(w == 2);
    REQUIRE(h == 1);
    CHECK(rgb[0] == 128);
    CHECK(rgb[1] == 128);
    CHECK(rgb[2] == 0);
    CHECK(rgb[3] == 255);
    CHECK(rgb[4] == 128);
    CHECK(rgb[5] == 128);
    for (size_t i = 0; i < normals.size(); ++i) {
        const float decoded = rgb[i] / 255.0f * 2.0f - 1.0f;
        CHECK(std::fabs(decoded - normals[i]) <= 1.0f / 127.0f);
    }
}

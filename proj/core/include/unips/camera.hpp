#pragma once

#include "unips/common.hpp"
#include "unips/vec3.hpp"

namespace unips {

enum class Projection { kPerspective, kOrthographic };

inline const char* projection_name(Projection p) {
    return p == Projection::kPerspective ? "perspective" : "orthographic";
}

// Camera at the world origin looking along +z; x right, y down (right-
// handed with z into the scene). Camera space therefore coincides with
// world space, and normals are reported in this frame.
struct CameraSpec {
    Projection projection = Projection::kPerspective;
    double focal_mm = 50.0;    // perspective only, valid range [20, 1000]
    double sensor_mm = 36.0;   // sensor width; height scales by aspect
    double ortho_width = 2.5;  // world-space view width (orthographic)
    int width = 64;
    int height = 64;

    double sensor_height_mm() const { return sensor_mm * height / width; }
    double ortho_height() const { return ortho_width * height / width; }

    void validate() const;
    // H and W must be divisible by 2 * patch_size (model contract).
    void validate_for_patch(int patch_size) const;
};

struct Ray {
    Vec3 origin;
    Vec3 dir;  // unit, pointing into the scene
};

// Continuous pixel coordinates: integer (px, py) is the center of pixel
// (col px, row py); px = -0.5 is the left sensor edge.
Ray camera_ray(const CameraSpec& cam, double px, double py);

// Unit vector from camera into the scene through the pixel (equals the
// primary ray direction).
Vec3 view_direction(const CameraSpec& cam, double px, double py);

}  // namespace unips

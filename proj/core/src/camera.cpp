#include "unips/camera.hpp"

namespace unips {

void CameraSpec::validate() const {
    if (width <= 0 || height <= 0) {
        throw ConfigError(cat("camera: non-positive image size ", width, "x", height));
    }
    if (projection == Projection::kPerspective) {
        if (focal_mm < 20.0 || focal_mm > 1000.0) {
            throw ConfigError(cat("camera: focal length ", focal_mm, "mm outside [20,1000]"));
        }
        if (sensor_mm <= 0.0) throw ConfigError("camera: sensor width must be positive");
    } else {
        if (ortho_width <= 0.0) throw ConfigError("camera: ortho view width must be positive");
    }
}

void CameraSpec::validate_for_patch(int patch_size) const {
    validate();
    const int div = 2 * patch_size;
    if (width % div != 0 || height % div != 0) {
        throw ContractError(cat("camera: resolution ", width, "x", height,
                                " not divisible by 2*patch_size = ", div));
    }
}

Ray camera_ray(const CameraSpec& cam, double px, double py) {
    if (cam.projection == Projection::kPerspective) {
        const double xs = (px + 0.5 - cam.width * 0.5) * (cam.sensor_mm / cam.width);
        const double ys = (py + 0.5 - cam.height * 0.5) * (cam.sensor_height_mm() / cam.height);
        return {Vec3{0, 0, 0}, Vec3{xs, ys, cam.focal_mm}.normalized()};
    }
    const double xw = (px + 0.5 - cam.width * 0.5) * (cam.ortho_width / cam.width);
    const double yw = (py + 0.5 - cam.height * 0.5) * (cam.ortho_height() / cam.height);
    return {Vec3{xw, yw, 0}, Vec3{0, 0, 1}};
}

Vec3 view_direction(const CameraSpec& cam, double px, double py) {
    return camera_ray(cam, px, py).dir;
}

}  // namespace unips

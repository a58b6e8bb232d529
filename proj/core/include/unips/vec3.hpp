#pragma once

#include <algorithm>
#include <cmath>

namespace unips {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3 operator*(const Vec3& o) const { return {x * o.x, y * o.y, z * o.z}; }
    Vec3& operator+=(const Vec3& o) {
        x += o.x;
        y += o.y;
        z += o.z;
        return *this;
    }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        const double n = norm();
        return n > 0 ? *this / n : Vec3{0, 0, 0};
    }
    double max_component() const { return std::max({x, y, z}); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// Row-major 3x3 rotation matrix.
struct Mat3 {
    double m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

    Vec3 apply(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Vec3 apply_transposed(const Vec3& v) const {
        return {m[0] * v.x + m[3] * v.y + m[6] * v.z, m[1] * v.x + m[4] * v.y + m[7] * v.z,
                m[2] * v.x + m[5] * v.y + m[8] * v.z};
    }

    static Mat3 from_euler(double ax, double ay, double az) {
        const double cx = std::cos(ax), sx = std::sin(ax);
        const double cy = std::cos(ay), sy = std::sin(ay);
        const double cz = std::cos(az), sz = std::sin(az);
        Mat3 r;
        // R = Rz * Ry * Rx
        r.m[0] = cz * cy;
        r.m[1] = cz * sy * sx - sz * cx;
        r.m[2] = cz * sy * cx + sz * sx;
        r.m[3] = sz * cy;
        r.m[4] = sz * sy * sx + cz * cx;
        r.m[5] = sz * sy * cx - cz * sx;
        r.m[6] = -sy;
        r.m[7] = cy * sx;
        r.m[8] = cy * cx;
        return r;
    }
};

}  // namespace unips

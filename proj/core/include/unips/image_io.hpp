#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unips/common.hpp"

namespace unips {

// 16-bit RGB PNG, linear encoding: channel = round(clamp(v,0,1) * 65535).
void write_png16_rgb(const std::string& path, const float* rgb, int width, int height);
std::vector<float> read_png16_rgb(const std::string& path, int& width, int& height);

// 8-bit grayscale (masks).
void write_png8_gray(const std::string& path, const uint8_t* gray, int width, int height);
std::vector<uint8_t> read_png8_gray(const std::string& path, int& width, int& height);

// 8-bit RGB (normal-map visualizations, plots).
void write_png8_rgb(const std::string& path, const uint8_t* rgb, int width, int height);
std::vector<uint8_t> read_png8_rgb(const std::string& path, int& width, int& height);

// Raw little-endian f32 blob with a 4-byte magic and u32 dimensions.
void write_f32_blob(const std::string& path, const char magic[4],
                    const std::vector<uint32_t>& dims, const float* data, size_t count);
std::vector<float> read_f32_blob(const std::string& path, const char magic[4], size_t n_dims,
                                 std::vector<uint32_t>& dims);

}  // namespace unips

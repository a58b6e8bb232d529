#include "unips/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

namespace unips {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngWriter {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWriter() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    }
};

struct PngReader {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReader() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    }
};

void write_png_impl(const std::string& path, const void* rows_base, int width, int height,
                    int bit_depth, int color_type, size_t row_bytes) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError(cat("cannot open ", path, " for writing"));
    PngWriter w;
    w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!w.png) throw IoError("libpng: write struct allocation failed");
    w.info = png_create_info_struct(w.png);
    if (!w.info) throw IoError("libpng: info struct allocation failed");
    if (setjmp(png_jmpbuf(w.png))) throw IoError(cat("libpng: failed writing ", path));

    png_init_io(w.png, f.get());
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(width),
                 static_cast<png_uint_32>(height), bit_depth, color_type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(w.png, w.info);
    if (bit_depth == 16) png_set_swap(w.png);  // buffers are little-endian

    const auto* base = static_cast<const unsigned char*>(rows_base);
    for (int y = 0; y < height; ++y) {
        png_write_row(w.png, const_cast<png_bytep>(base + static_cast<size_t>(y) * row_bytes));
    }
    png_write_end(w.png, nullptr);
}

void read_png_impl(const std::string& path, std::vector<unsigned char>& out, int& width,
                   int& height, int expect_bit_depth, int expect_color_type, int channels) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError(cat("cannot open ", path));
    PngReader r;
    r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!r.png) throw IoError("libpng: read struct allocation failed");
    r.info = png_create_info_struct(r.png);
    if (!r.info) throw IoError("libpng: info struct allocation failed");
    if (setjmp(png_jmpbuf(r.png))) throw IoError(cat("libpng: failed reading ", path));

    png_init_io(r.png, f.get());
    png_read_info(r.png, r.info);
    width = static_cast<int>(png_get_image_width(r.png, r.info));
    height = static_cast<int>(png_get_image_height(r.png, r.info));
    const int depth = png_get_bit_depth(r.png, r.info);
    const int color = png_get_color_type(r.png, r.info);
    if (depth != expect_bit_depth || color != expect_color_type) {
        throw IoError(cat(path, ": expected ", expect_bit_depth, "-bit color type ",
                          expect_color_type, ", got ", depth, "-bit type ", color));
    }
    if (depth == 16) png_set_swap(r.png);

    const size_t row_bytes = static_cast<size_t>(width) * channels * (depth / 8);
    out.resize(row_bytes * static_cast<size_t>(height));
    for (int y = 0; y < height; ++y) {
        png_read_row(r.png, out.data() + static_cast<size_t>(y) * row_bytes, nullptr);
    }
    png_read_end(r.png, nullptr);
}

}  // namespace

void write_png16_rgb(const std::string& path, const float* rgb, int width, int height) {
    std::vector<uint16_t> buf(static_cast<size_t>(width) * height * 3);
    for (size_t i = 0; i < buf.size(); ++i) {
        const double v = std::clamp(static_cast<double>(rgb[i]), 0.0, 1.0);
        buf[i] = static_cast<uint16_t>(std::lround(v * 65535.0));
    }
    write_png_impl(path, buf.data(), width, height, 16, PNG_COLOR_TYPE_RGB,
                   static_cast<size_t>(width) * 6);
}

std::vector<float> read_png16_rgb(const std::string& path, int& width, int& height) {
    std::vector<unsigned char> raw;
    read_png_impl(path, raw, width, height, 16, PNG_COLOR_TYPE_RGB, 3);
    const auto* p16 = reinterpret_cast<const uint16_t*>(raw.data());
    std::vector<float> out(static_cast<size_t>(width) * height * 3);
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(p16[i]) / 65535.0f;
    return out;
}

void write_png8_gray(const std::string& path, const uint8_t* gray, int width, int height) {
    write_png_impl(path, gray, width, height, 8, PNG_COLOR_TYPE_GRAY,
                   static_cast<size_t>(width));
}

std::vector<uint8_t> read_png8_gray(const std::string& path, int& width, int& height) {
    std::vector<unsigned char> raw;
    read_png_impl(path, raw, width, height, 8, PNG_COLOR_TYPE_GRAY, 1);
    return raw;
}

void write_png8_rgb(const std::string& path, const uint8_t* rgb, int width, int height) {
    write_png_impl(path, rgb, width, height, 8, PNG_COLOR_TYPE_RGB,
                   static_cast<size_t>(width) * 3);
}

std::vector<uint8_t> read_png8_rgb(const std::string& path, int& width, int& height) {
    std::vector<unsigned char> raw;
    read_png_impl(path, raw, width, height, 8, PNG_COLOR_TYPE_RGB, 3);
    return raw;
}

void write_f32_blob(const std::string& path, const char magic[4],
                    const std::vector<uint32_t>& dims, const float* data, size_t count) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError(cat("cannot open ", path, " for writing"));
    if (std::fwrite(magic, 1, 4, f.get()) != 4) throw IoError(cat("short write to ", path));
    for (uint32_t d : dims) {
        if (std::fwrite(&d, sizeof(d), 1, f.get()) != 1) throw IoError(cat("short write to ", path));
    }
    if (std::fwrite(data, sizeof(float), count, f.get()) != count) {
        throw IoError(cat("short write to ", path));
    }
}

std::vector<float> read_f32_blob(const std::string& path, const char magic[4], size_t n_dims,
                                 std::vector<uint32_t>& dims) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError(cat("missing file: ", path));
    char got[4];
    if (std::fread(got, 1, 4, f.get()) != 4 || std::memcmp(got, magic, 4) != 0) {
        throw IoError(cat(path, ": bad magic (expected ", std::string(magic, 4), ")"));
    }
    dims.resize(n_dims);
    for (size_t i = 0; i < n_dims; ++i) {
        if (std::fread(&dims[i], sizeof(uint32_t), 1, f.get()) != 1) {
            throw IoError(cat(path, ": truncated header"));
        }
    }
    std::vector<float> data;
    float chunk[4096];
    size_t n;
    while ((n = std::fread(chunk, sizeof(float), 4096, f.get())) > 0) {
        data.insert(data.end(), chunk, chunk + n);
    }
    return data;
}

}  // namespace unips

#include "unitmod/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

UNITMOD_BEGIN_NAMESPACE

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw IoError("cannot open '" + path.string() + "'");
    return f;
}

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw IoError(std::string("libpng: ") + msg); }
void png_warn(png_structp, png_const_charp) {}

struct Decoded {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> bytes;
};

Decoded decode(const std::filesystem::path& path) {
    FilePtr f = open_file(path, "rb");
    png_byte sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw IoError("'" + path.string() + "' is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    png_infop info = png_create_info_struct(png);
    Decoded out;
    try {
        png_init_io(png, f.get());
        png_set_sig_bytes(png, 8);
        png_read_info(png, info);
        const auto color = png_get_color_type(png, info);
        const int depth = png_get_bit_depth(png, info);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
        if (depth == 16) png_set_strip_16(png);
        if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
        png_read_update_info(png, info);
        out.width = static_cast<int>(png_get_image_width(png, info));
        out.height = static_cast<int>(png_get_image_height(png, info));
        out.channels = png_get_channels(png, info);
        const std::size_t stride = png_get_rowbytes(png, info);
        out.bytes.resize(stride * static_cast<std::size_t>(out.height));
        std::vector<png_bytep> rows(static_cast<std::size_t>(out.height));
        for (int y = 0; y < out.height; ++y) rows[static_cast<std::size_t>(y)] = out.bytes.data() + stride * y;
        png_read_image(png, rows.data());
        png_read_end(png, nullptr);
    } catch (const IoError& e) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("'" + path.string() + "': " + e.what());
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void encode(const std::filesystem::path& path, int width, int height, int color_type, int depth,
            const std::vector<std::uint8_t>& bytes) {
    FilePtr f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    png_infop info = png_create_info_struct(png);
    try {
        png_init_io(png, f.get());
        png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), depth,
                     color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        // No timestamps or gamma chunks, so identical pixels give identical files.
        png_write_info(png, info);
        const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
        const std::size_t stride = static_cast<std::size_t>(width) * channels * (depth / 8);
        for (int y = 0; y < height; ++y) {
            png_write_row(png, const_cast<png_bytep>(bytes.data() + stride * y));
        }
        png_write_end(png, nullptr);
    } catch (const IoError& e) {
        png_destroy_write_struct(&png, &info);
        throw IoError("'" + path.string() + "': " + e.what());
    }
    png_destroy_write_struct(&png, &info);
}

std::uint8_t to_u8(real v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp<double>(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Tensor read_png(const std::filesystem::path& path) {
    const Decoded d = decode(path);
    Tensor out({3, d.height, d.width});
    auto dst = out.data();
    const std::int64_t plane = static_cast<std::int64_t>(d.height) * d.width;
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
            const int src_c = d.channels >= 3 ? c : 0;
            dst[c * plane + i] = static_cast<real>(d.bytes[static_cast<std::size_t>(i * d.channels + src_c)] / 255.0);
        }
    }
    return out;
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
    const int nd = image.ndim();
    if (!(nd == 3 || (nd == 4 && image.dim(0) == 1)) || image.dim(nd - 3) != 3) {
        throw DimensionError("write_png: expected 3×H×W, got " + shape_str(image.shape()));
    }
    const int h = image.dim(nd - 2);
    const int w = image.dim(nd - 1);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(plane * 3));
    auto src = image.data();
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) bytes[static_cast<std::size_t>(i * 3 + c)] = to_u8(src[c * plane + i]);
    }
    encode(path, w, h, PNG_COLOR_TYPE_RGB, 8, bytes);
}

Tensor false_color(const Tensor& plane) {
    const int nd = plane.ndim();
    if (nd < 2 || plane.numel() != static_cast<std::int64_t>(plane.dim(nd - 2)) * plane.dim(nd - 1)) {
        throw DimensionError("false_color: expected a single plane, got " + shape_str(plane.shape()));
    }
    const int h = plane.dim(nd - 2);
    const int w = plane.dim(nd - 1);
    const std::int64_t n = plane.numel();
    Tensor out({3, h, w});
    auto src = plane.data();
    auto dst = out.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = std::clamp<double>(src[i], 0.0, 1.0);
        dst[i] = static_cast<real>(std::clamp(1.5 * v - 0.25, 0.0, 1.0));
        dst[n + i] = static_cast<real>(std::sin(v * 3.14159265358979 * 0.5));
        dst[2 * n + i] = static_cast<real>(1.0 - v);
    }
    return out;
}

Tensor quantize8(const Tensor& image) {
    Tensor out(image.shape());
    auto src = image.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<real>(to_u8(src[i]) / 255.0);
    return out;
}

UNITMOD_END_NAMESPACE

#include "msom/render.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <memory>

#include "msom/error.hpp"

namespace msom {

namespace {

struct File {
    std::FILE* f;
    ~File() {
        if (f) std::fclose(f);
    }
};

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw DataError(std::string("png: ") + msg); }
void png_warn(png_structp, png_const_charp) {}

}  // namespace

void write_rgb_png(const std::filesystem::path& path, std::size_t height, std::size_t width,
                   std::span<const std::uint8_t> rgb) {
    if (rgb.size() != height * width * 3) throw ShapeError("png: pixel buffer does not match size");
    if (height == 0 || width == 0) throw UsageError("png: empty image");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    File file{std::fopen(path.c_str(), "wb")};
    if (!file.f) throw DataError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    png_infop info = png_create_info_struct(png);
    try {
        png_init_io(png, file.f);
        png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                     PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (std::size_t y = 0; y < height; ++y)
            png_write_row(png, const_cast<png_bytep>(rgb.data() + y * width * 3));
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_rgb_png(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
    File file{std::fopen(path.c_str(), "rb")};
    if (!file.f) throw DataError("cannot read " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    png_infop info = png_create_info_struct(png);
    std::vector<std::uint8_t> out;
    try {
        png_init_io(png, file.f);
        png_read_info(png, info);
        png_set_expand(png);
        png_set_strip_16(png);
        png_set_strip_alpha(png);
        png_set_gray_to_rgb(png);
        png_read_update_info(png, info);
        width = png_get_image_width(png, info);
        height = png_get_image_height(png, info);
        if (png_get_rowbytes(png, info) != width * 3) throw DataError("png: unexpected layout in " + path.string());
        out.resize(height * width * 3);
        std::vector<png_bytep> rows(height);
        for (std::size_t y = 0; y < height; ++y) rows[y] = out.data() + y * width * 3;
        png_read_image(png, rows.data());
        png_read_end(png, nullptr);
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void render_classes(const std::filesystem::path& path, std::span<const std::uint8_t> raster, std::size_t height,
                    std::size_t width, const ClassScheme& scheme) {
    if (raster.size() != height * width) throw ShapeError("render: raster does not match size");
    std::vector<std::uint8_t> rgb(raster.size() * 3, 0);
    for (std::size_t i = 0; i < raster.size(); ++i) {
        if (raster[i] == kUnlabeled) continue;
        if (raster[i] >= scheme.size())
            throw DataError("render: class " + std::to_string(raster[i]) + " outside a " +
                            std::to_string(scheme.size()) + "-class scheme");
        const Rgb& c = scheme[raster[i]].color;
        std::copy(c.begin(), c.end(), rgb.begin() + static_cast<std::ptrdiff_t>(i * 3));
    }
    write_rgb_png(path, height, width, rgb);
}

std::vector<std::uint8_t> read_class_png(const std::filesystem::path& path, const ClassScheme& scheme,
                                         std::size_t& height, std::size_t& width) {
    const auto rgb = read_rgb_png(path, height, width);
    std::vector<std::uint8_t> out(height * width);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Rgb c{rgb[i * 3], rgb[i * 3 + 1], rgb[i * 3 + 2]};
        if (c == Rgb{0, 0, 0}) {
            out[i] = kUnlabeled;
            continue;
        }
        const auto id = scheme.find_color(c);
        if (!id)
            throw DataError("render: colour (" + std::to_string(c[0]) + "," + std::to_string(c[1]) + "," +
                            std::to_string(c[2]) + ") is not in the palette");
        out[i] = static_cast<std::uint8_t>(*id);
    }
    return out;
}

void render_boundaries(const std::filesystem::path& path, const Patch& patch, const SuperpixelMap& map) {
    const std::size_t H = patch.height, W = patch.width;
    if (map.height != H || map.width != W) throw ShapeError("render: superpixel map does not match patch");
    const PCImage pc = pca_project(patch, 1);
    double lo = 0.0, hi = 0.0;
    for (std::size_t i = 0; i < H * W; ++i) {
        lo = std::min(lo, pc.components[i]);
        hi = std::max(hi, pc.components[i]);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    std::vector<std::uint8_t> rgb(H * W * 3);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const std::size_t i = y * W + x;
            const bool edge = (x + 1 < W && map.ids[i] != map.ids[i + 1]) || (y + 1 < H && map.ids[i] != map.ids[i + W]);
            if (edge) {
                rgb[i * 3] = 255;
                rgb[i * 3 + 1] = rgb[i * 3 + 2] = 0;
            } else {
                const auto g = static_cast<std::uint8_t>(std::lround(255.0 * (pc.components[i] - lo) / span));
                rgb[i * 3] = rgb[i * 3 + 1] = rgb[i * 3 + 2] = g;
            }
        }
    write_rgb_png(path, H, W, rgb);
}

}  // namespace msom

#pragma once

// PNG output: class rasters through the scheme palette, and superpixel
// boundary overlays.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "msom/raster.hpp"
#include "msom/superpixel.hpp"

namespace msom {

// 8-bit RGB, row-major, no alpha.
void write_rgb_png(const std::filesystem::path& path, std::size_t height, std::size_t width,
                   std::span<const std::uint8_t> rgb);
std::vector<std::uint8_t> read_rgb_png(const std::filesystem::path& path, std::size_t& height, std::size_t& width);

// Unlabeled pixels (255) render black; any other value >= K is a DataError.
void render_classes(const std::filesystem::path& path, std::span<const std::uint8_t> raster, std::size_t height,
                    std::size_t width, const ClassScheme& scheme);
// Inverse palette lookup; unknown colours are a DataError, black maps to 255.
std::vector<std::uint8_t> read_class_png(const std::filesystem::path& path, const ClassScheme& scheme,
                                         std::size_t& height, std::size_t& width);

// First principal component as grey with superpixel boundaries in red.
void render_boundaries(const std::filesystem::path& path, const Patch& patch, const SuperpixelMap& map);

}  // namespace msom

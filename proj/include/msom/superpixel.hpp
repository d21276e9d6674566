#pragma once

// SLIC superpixels over a principal-component image, and the partition type
// the global branch tokenizes with.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "msom/raster.hpp"

namespace msom {

struct SuperpixelMap {
    std::size_t height = 0, width = 0;
    std::size_t n_sp = 0;
    std::vector<std::int32_t> ids;    // [H, W], values 0..n_sp-1
    std::vector<std::uint32_t> sizes; // pixel count per id

    std::int32_t at(std::size_t y, std::size_t x) const { return ids[y * width + x]; }
    double reduction_factor() const { return static_cast<double>(height * width) / static_cast<double>(n_sp); }

    // Throws DataError unless ids cover 0..n_sp-1, sizes match and every id is
    // a single 4-connected component.
    void validate() const;

    // Every pixel its own superpixel, in row-major order.
    static SuperpixelMap pixels(std::size_t height, std::size_t width);
};

struct SlicOptions {
    std::size_t n_sp_target = 500;
    double compactness = 10.0;
    std::size_t iters = 10;
    // Initialization is grid-deterministic; the seed is carried for
    // provenance only.
    std::uint64_t seed = 0;
};

SuperpixelMap slic(const PCImage& pc, const SlicOptions& options = {});

// Relabels 4-connected components, merges components smaller than a quarter
// of the mean label area into their largest neighbour, and compacts ids in
// first-occurrence scan order. `expected_segments` of 0 uses the number of
// distinct input ids.
SuperpixelMap enforce_connectivity(std::span<const std::int32_t> ids, std::size_t height, std::size_t width,
                                   std::size_t expected_segments = 0);

// Fraction of reference boundary pixels lying within `tolerance` pixels
// (Chebyshev) of a boundary in `candidate`.
double boundary_recall(std::span<const std::int32_t> reference, std::span<const std::int32_t> candidate,
                       std::size_t height, std::size_t width, std::size_t tolerance = 2);

void write_superpixels(const std::filesystem::path& path, const SuperpixelMap& map);
SuperpixelMap read_superpixels(const std::filesystem::path& path);

}  // namespace msom

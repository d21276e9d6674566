#pragma once

// Synthetic land-cover fixtures: Voronoi regions, one class per region,
// a fixed spectrum per class and Gaussian per-pixel noise on top.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "msom/raster.hpp"

namespace msom {

struct SynthConfig {
    std::size_t classes = 3;
    std::size_t channels = 4;
    std::size_t size = 32;      // patch side
    std::size_t regions = 6;    // Voronoi cells per patch
    double separation = 2.0;    // minimum distance between class spectra
    double noise = 0.5;         // per-pixel, per-band standard deviation
    std::uint64_t seed = 0;
};

// classes x channels, pairwise distance >= separation.
std::vector<std::vector<float>> class_spectra(const SynthConfig& config);

std::vector<Patch> synth_patches(const SynthConfig& config, std::size_t count);

// One scene of height x width. Cells are sized like those of a patch, so a
// size x size tile holds about `regions` of them.
Scene synth_scene(const SynthConfig& config, std::size_t height, std::size_t width);

}  // namespace msom

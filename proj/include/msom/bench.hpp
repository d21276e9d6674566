#pragma once

// Times the Mamba stack forward at pixel-sequence length H*W against
// superpixel-sequence length n_sp, with the same hidden width.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace msom {

struct BenchOptions {
    std::vector<std::pair<std::size_t, std::size_t>> sizes{{32, 32}, {64, 64}, {128, 128}};
    std::size_t n_sp_target = 500;
    std::size_t repeats = 5;   // >= 3; the median is reported
    std::size_t warmup = 1;    // untimed runs per length
    std::size_t hidden = 64;
    std::size_t d_state = 16;
    std::uint64_t seed = 0;
};

struct BenchRow {
    std::size_t height = 0, width = 0, n_sp = 0;
    double reduction_factor = 0.0;  // H*W / n_sp
    double scan_time_pixel = 0.0, scan_time_superpixel = 0.0;  // seconds, median
    double speedup = 0.0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    nlohmann::json environment;

    nlohmann::json to_json() const;
    std::string to_csv() const;
};

// n_sp is min(n_sp_target, H*W): the sequence length a superpixel model sees.
double reduction_factor(std::size_t height, std::size_t width, std::size_t n_sp);

BenchReport run_bench(const BenchOptions& options);

// Writes <stem>.json and <stem>.csv next to each other.
void write_bench(const std::filesystem::path& json_path, const BenchReport& report);

}  // namespace msom

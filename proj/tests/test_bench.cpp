#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "msom/bench.hpp"
#include "msom/error.hpp"

using namespace msom;

TEST(Bench, ReductionFactorArithmetic) {
    EXPECT_EQ(reduction_factor(128, 128, 500), 32.768);
    EXPECT_EQ(16384.0 / 500.0, 32.768);
    EXPECT_EQ(reduction_factor(8, 8, 64), 1.0);
    EXPECT_THROW(reduction_factor(8, 8, 0), UsageError);
}

TEST(Bench, RejectsTooFewRepeats) {
    BenchOptions o;
    o.repeats = 2;
    EXPECT_THROW(run_bench(o), UsageError);
}

TEST(Bench, DegenerateSizeAndSchema) {
    BenchOptions o;
    o.sizes = {{8, 8}};
    o.n_sp_target = 500;
    o.repeats = 3;
    o.hidden = 8;
    o.d_state = 4;
    auto r = run_bench(o);
    ASSERT_EQ(r.rows.size(), 1u);
    EXPECT_EQ(r.rows[0].n_sp, 64u);
    EXPECT_EQ(r.rows[0].reduction_factor, 1.0);
    EXPECT_GT(r.rows[0].scan_time_pixel, 0.0);
    EXPECT_GT(r.rows[0].scan_time_superpixel, 0.0);

    const auto dir = std::filesystem::temp_directory_path() / "msom_bench";
    std::filesystem::create_directories(dir);
    write_bench(dir / "bench.json", r);
    std::ifstream csv(dir / "bench.csv");
    std::string header;
    std::getline(csv, header);
    EXPECT_EQ(header, "H,W,n_sp,reduction_factor,scan_time_pixel,scan_time_superpixel,speedup");
    auto j = nlohmann::json::parse(std::ifstream(dir / "bench.json"));
    for (const char* k : {"H", "W", "n_sp", "reduction_factor", "scan_time_pixel", "scan_time_superpixel", "speedup"})
        EXPECT_TRUE(j["rows"][0].contains(k)) << k;
}

TEST(Bench, SpeedupGrowsWithReduction) {
    BenchOptions o;
    o.sizes = {{16, 16}, {32, 32}, {64, 64}};
    o.n_sp_target = 64;
    o.repeats = 5;
    o.hidden = 16;
    o.d_state = 8;
    auto r = run_bench(o);
    ASSERT_EQ(r.rows.size(), 3u);
    EXPECT_EQ(r.rows[0].reduction_factor, 4.0);
    EXPECT_EQ(r.rows[2].reduction_factor, 64.0);
    for (std::size_t i = 1; i < r.rows.size(); ++i)
        EXPECT_GT(r.rows[i].speedup, r.rows[i - 1].speedup) << "rows " << i - 1 << " and " << i;
}

#include "msom/bench.hpp"

#include <algorithm>
#include <chrono>
#include <random>
#include <sstream>

#include "msom/error.hpp"
#include "msom/io.hpp"
#include "msom/mamba.hpp"

namespace msom {

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double time_stack(const MambaStack& stack, std::size_t L, std::size_t D, const BenchOptions& o, std::mt19937_64& rng) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::vector<float> g(L * D);
    for (auto& v : g) v = n(rng);
    const Tensor G = Tensor::from({1, L, D}, std::move(g));
    for (std::size_t i = 0; i < o.warmup; ++i) mamba_stack(G, stack);
    std::vector<double> t;
    for (std::size_t i = 0; i < o.repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        Tensor y = mamba_stack(G, stack);
        t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return median(std::move(t));
}

}  // namespace

double reduction_factor(std::size_t height, std::size_t width, std::size_t n_sp) {
    if (n_sp == 0) throw UsageError("reduction factor needs n_sp > 0");
    return static_cast<double>(height * width) / static_cast<double>(n_sp);
}

BenchReport run_bench(const BenchOptions& o) {
    if (o.repeats < 3) throw UsageError("bench needs at least 3 repeats");
    if (o.sizes.empty()) throw UsageError("bench needs at least one size");
    if (o.n_sp_target == 0 || o.hidden == 0 || o.d_state == 0) throw UsageError("bench: sizes must be positive");
    std::mt19937_64 rng(o.seed);
    MambaConfig mc;
    mc.d_model = o.hidden;
    mc.d_state = o.d_state;
    const MambaStack stack = init_mamba_stack(mc, rng);

    BenchReport r;
    for (auto [H, W] : o.sizes) {
        if (H == 0 || W == 0) throw UsageError("bench: empty size");
        BenchRow row;
        row.height = H;
        row.width = W;
        row.n_sp = std::min(o.n_sp_target, H * W);
        row.reduction_factor = reduction_factor(H, W, row.n_sp);
        row.scan_time_pixel = time_stack(stack, H * W, o.hidden, o, rng);
        row.scan_time_superpixel = time_stack(stack, row.n_sp, o.hidden, o, rng);
        row.speedup = row.scan_time_pixel / row.scan_time_superpixel;
        r.rows.push_back(row);
    }
    r.environment = {{"hidden", o.hidden},
                     {"d_state", o.d_state},
                     {"blocks", kMambaDepth},
                     {"repeats", o.repeats},
                     {"warmup", o.warmup},
                     {"statistic", "median"},
                     {"threads", 1},
                     {"compiler", __VERSION__}};
    return r;
}

nlohmann::json BenchReport::to_json() const {
    nlohmann::json rows_j = nlohmann::json::array();
    for (const auto& r : rows)
        rows_j.push_back({{"H", r.height},
                          {"W", r.width},
                          {"n_sp", r.n_sp},
                          {"reduction_factor", r.reduction_factor},
                          {"scan_time_pixel", r.scan_time_pixel},
                          {"scan_time_superpixel", r.scan_time_superpixel},
                          {"speedup", r.speedup}});
    return {{"rows", rows_j}, {"environment", environment}};
}

std::string BenchReport::to_csv() const {
    std::ostringstream s;
    s.precision(9);
    s << "H,W,n_sp,reduction_factor,scan_time_pixel,scan_time_superpixel,speedup\n";
    for (const auto& r : rows)
        s << r.height << ',' << r.width << ',' << r.n_sp << ',' << r.reduction_factor << ',' << r.scan_time_pixel << ','
          << r.scan_time_superpixel << ',' << r.speedup << '\n';
    return s.str();
}

void write_bench(const std::filesystem::path& json_path, const BenchReport& report) {
    io::write_json_file(json_path, report.to_json());
    auto csv = json_path;
    csv.replace_extension(".csv");
    auto out = io::open_out(csv);
    out << report.to_csv();
}

}  // namespace msom

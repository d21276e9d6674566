#include "msom/synth.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "msom/error.hpp"

namespace msom {

namespace {

struct Field {
    std::vector<std::uint8_t> labels;
    std::vector<float> bands;
};

Field voronoi_field(const SynthConfig& cfg, const std::vector<std::vector<float>>& spectra, std::size_t H,
                    std::size_t W, std::size_t cells, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> uy(0.0, static_cast<double>(H)), ux(0.0, static_cast<double>(W));
    std::uniform_int_distribution<std::size_t> uk(0, cfg.classes - 1);
    std::vector<double> cy(cells), cx(cells);
    std::vector<std::uint8_t> cls(cells);
    for (std::size_t i = 0; i < cells; ++i) {
        cy[i] = uy(rng);
        cx[i] = ux(rng);
        cls[i] = static_cast<std::uint8_t>(uk(rng));
    }
    Field f;
    f.labels.resize(H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double best = std::numeric_limits<double>::max();
            for (std::size_t i = 0; i < cells; ++i) {
                const double d = (y - cy[i]) * (y - cy[i]) + (x - cx[i]) * (x - cx[i]);
                if (d < best) {
                    best = d;
                    f.labels[y * W + x] = cls[i];
                }
            }
        }
    std::normal_distribution<double> n(0.0, cfg.noise);
    f.bands.resize(cfg.channels * H * W);
    for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t i = 0; i < H * W; ++i)
            f.bands[c * H * W + i] = static_cast<float>(spectra[f.labels[i]][c] + n(rng));
    return f;
}

void check(const SynthConfig& cfg) {
    if (cfg.classes == 0 || cfg.classes > 254 || cfg.channels == 0 || cfg.size == 0 || cfg.regions == 0)
        throw UsageError("synth: classes, channels, size and regions must be positive");
    if (!(cfg.noise >= 0.0) || !(cfg.separation > 0.0)) throw UsageError("synth: bad noise or separation");
}

}  // namespace

std::vector<std::vector<float>> class_spectra(const SynthConfig& cfg) {
    check(cfg);
    std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995ULL);
    std::normal_distribution<double> n(0.0, cfg.separation);
    std::vector<std::vector<float>> s;
    for (int attempt = 0; attempt < 1000 && s.size() < cfg.classes; ++attempt) {
        std::vector<float> v(cfg.channels);
        for (auto& x : v) x = static_cast<float>(n(rng));
        bool ok = true;
        for (const auto& o : s) {
            double d = 0.0;
            for (std::size_t c = 0; c < cfg.channels; ++c) d += (v[c] - o[c]) * (v[c] - o[c]);
            ok = ok && std::sqrt(d) >= cfg.separation;
        }
        if (ok) s.push_back(std::move(v));
    }
    if (s.size() < cfg.classes) throw UsageError("synth: cannot place class spectra that far apart");
    return s;
}

std::vector<Patch> synth_patches(const SynthConfig& cfg, std::size_t count) {
    const auto spectra = class_spectra(cfg);
    std::mt19937_64 rng(cfg.seed);
    std::vector<Patch> out;
    for (std::size_t k = 0; k < count; ++k) {
        Field f = voronoi_field(cfg, spectra, cfg.size, cfg.size, cfg.regions, rng);
        Patch p;
        p.patch_id = "s" + std::to_string(k);
        p.channels = cfg.channels;
        p.height = p.width = cfg.size;
        p.bands = std::move(f.bands);
        p.labels = std::move(f.labels);
        std::vector<std::size_t> hist(cfg.classes, 0);
        for (auto l : p.labels) ++hist[l];
        std::size_t best = 0;
        for (std::size_t c = 1; c < cfg.classes; ++c)
            if (hist[c] > hist[best]) best = c;
        p.dominant_class = static_cast<int>(best);
        out.push_back(std::move(p));
    }
    return out;
}

Scene synth_scene(const SynthConfig& cfg, std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) throw UsageError("synth: empty scene");
    const auto spectra = class_spectra(cfg);
    std::mt19937_64 rng(cfg.seed);
    const double area = static_cast<double>(height * width) / static_cast<double>(cfg.size * cfg.size);
    const auto cells = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(area * cfg.regions)));
    Field f = voronoi_field(cfg, spectra, height, width, cells, rng);
    Scene s;
    s.channels = cfg.channels;
    s.height = height;
    s.width = width;
    s.bands = std::move(f.bands);
    s.labels = std::move(f.labels);
    return s;
}

}  // namespace msom

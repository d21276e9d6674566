#include "msom/raster.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <Eigen/Dense>

#include "msom/error.hpp"
#include "msom/io.hpp"

namespace msom {

ClassScheme::ClassScheme(std::vector<ClassInfo> classes) : classes_(std::move(classes)) {
    std::set<std::string> names;
    for (std::size_t i = 0; i < classes_.size(); ++i) {
        if (classes_[i].id != i) throw DataError("class scheme: ids must be contiguous from 0");
        if (!names.insert(classes_[i].name).second) throw DataError("class scheme: duplicate name " + classes_[i].name);
    }
    if (classes_.size() > kUnlabeled) throw DataError("class scheme: too many classes");
}

ClassScheme ClassScheme::land_cover() {
    return ClassScheme({
        {0, "Temp-needleleaf", {1, 62, 2}},
        {1, "Taiga-needleleaf", {149, 156, 112}},
        {2, "Broadleaf-dec.", {20, 139, 61}},
        {3, "Mixed-forest", {93, 117, 43}},
        {4, "Shrubland", {179, 137, 51}},
        {5, "Grassland", {226, 206, 136}},
        {6, "Polar-grassland", {200, 200, 200}},
        {7, "Wetland", {108, 163, 138}},
        {8, "Cropland", {231, 174, 103}},
        {9, "Barren", {166, 171, 174}},
        {10, "Urban", {221, 32, 38}},
        {11, "Water", {76, 112, 164}},
        {12, "Snow/Ice", {255, 255, 255}},
    });
}

ClassScheme ClassScheme::land_cover_prefix(std::size_t k) {
    auto all = land_cover().classes();
    if (k == 0 || k > all.size()) throw UsageError("class scheme: prefix size must be in 1..13");
    all.resize(k);
    return ClassScheme(std::move(all));
}

std::optional<std::size_t> ClassScheme::find_color(const Rgb& color) const {
    for (const auto& c : classes_)
        if (c.color == color) return c.id;
    return std::nullopt;
}

nlohmann::json ClassScheme::to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& c : classes_)
        j.push_back({{"id", c.id}, {"name", c.name}, {"color", {c.color[0], c.color[1], c.color[2]}}});
    return j;
}

ClassScheme ClassScheme::from_json(const nlohmann::json& j) {
    std::vector<ClassInfo> classes;
    for (const auto& e : j) {
        ClassInfo c;
        c.id = e.at("id").get<std::size_t>();
        c.name = e.at("name").get<std::string>();
        const auto rgb = e.at("color").get<std::vector<int>>();
        if (rgb.size() != 3) throw DataError("class scheme: color must have 3 channels");
        for (int i = 0; i < 3; ++i) c.color[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(rgb[static_cast<std::size_t>(i)]);
        classes.push_back(std::move(c));
    }
    return ClassScheme(std::move(classes));
}

void Patch::validate(std::size_t num_classes) const {
    if (bands.size() != channels * height * width)
        throw DataError("patch " + patch_id + ": band data does not match [C, H, W]");
    if (has_labels()) {
        if (labels.size() != pixels()) throw DataError("patch " + patch_id + ": labels do not match [H, W]");
        for (auto l : labels)
            if (l != kUnlabeled && l >= num_classes)
                throw DataError("patch " + patch_id + ": label " + std::to_string(l) + " out of range for K = " +
                                std::to_string(num_classes));
    }
    if (has_mask() && valid_mask.size() != pixels()) throw DataError("patch " + patch_id + ": mask does not match [H, W]");
}

PCImage pca_project(const Patch& patch, std::size_t n_components) {
    const std::size_t C = patch.channels, N = patch.pixels();
    if (n_components == 0 || C < n_components)
        throw UsageError("pca: need at least " + std::to_string(n_components) + " bands, patch has " + std::to_string(C));
    if (N <= n_components) throw UsageError("pca: too few pixels");
    for (float v : patch.bands)
        if (!std::isfinite(v)) throw NumericError("pca: non-finite band value in patch " + patch.patch_id);

    Eigen::MatrixXd X(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(C));
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < N; ++i) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = patch.bands[c * N + i];
    const Eigen::RowVectorXd mu = X.colwise().mean();
    X.rowwise() -= mu;
    const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(N - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw NumericError("pca: eigendecomposition failed");

    const double trace = cov.trace();
    PCImage out;
    out.height = patch.height;
    out.width = patch.width;
    out.components.assign(n_components * N, 0.0);
    out.explained_variance.assign(n_components, 0.0);
    out.axes.assign(n_components, std::vector<double>(C, 0.0));
    for (std::size_t k = 0; k < n_components; ++k) {
        const auto col = static_cast<Eigen::Index>(C - 1 - k);  // eigenvalues ascend
        const double lambda = solver.eigenvalues()(col);
        if (trace <= 0.0 || lambda <= 1e-10 * trace) {
            out.degenerate = true;
            continue;
        }
        Eigen::VectorXd v = solver.eigenvectors().col(col);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0.0) v = -v;
        out.explained_variance[k] = lambda;
        for (std::size_t c = 0; c < C; ++c) out.axes[k][c] = v(static_cast<Eigen::Index>(c));
        const Eigen::VectorXd proj = X * v;
        for (std::size_t i = 0; i < N; ++i) out.components[k * N + i] = proj(static_cast<Eigen::Index>(i));
    }
    return out;
}

std::vector<Patch> extract_patches(const Scene& scene, const ExtractOptions& options) {
    if (options.size == 0) throw UsageError("extract: patch size must be positive");
    if (!(options.dominance >= 0.0 && options.dominance < 1.0)) throw UsageError("extract: dominance must be in [0, 1)");
    const std::size_t C = scene.channels, H = scene.height, W = scene.width, S = options.size;
    if (scene.bands.size() != C * H * W || scene.labels.size() != H * W ||
        (!scene.valid_mask.empty() && scene.valid_mask.size() != H * W))
        throw DataError("extract: scene rasters do not match [C, H, W]");

    std::vector<Patch> patches;
    for (std::size_t ty = 0; ty + S <= H; ty += S)
        for (std::size_t tx = 0; tx + S <= W; tx += S) {
            bool valid = true;
            std::array<std::size_t, 256> hist{};
            std::size_t labeled = 0;
            for (std::size_t y = ty; y < ty + S && valid; ++y)
                for (std::size_t x = tx; x < tx + S; ++x) {
                    const std::size_t i = y * W + x;
                    if (!scene.valid_mask.empty() && !scene.valid_mask[i]) {
                        valid = false;
                        break;
                    }
                    if (scene.labels[i] != kUnlabeled) {
                        ++hist[scene.labels[i]];
                        ++labeled;
                    }
                }
            if (!valid || labeled == 0) continue;
            const auto best = static_cast<std::size_t>(std::max_element(hist.begin(), hist.end()) - hist.begin());
            if (!(static_cast<double>(hist[best]) > options.dominance * static_cast<double>(labeled))) continue;

            Patch p;
            p.patch_id = options.id_prefix + "_" + std::to_string(ty / S) + "_" + std::to_string(tx / S);
            p.channels = C;
            p.height = S;
            p.width = S;
            p.dominant_class = static_cast<int>(best);
            p.bands.resize(C * S * S);
            p.labels.resize(S * S);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < S; ++y)
                    std::copy_n(scene.bands.begin() + static_cast<std::ptrdiff_t>((c * H + ty + y) * W + tx), S,
                                p.bands.begin() + static_cast<std::ptrdiff_t>((c * S + y) * S));
            for (std::size_t y = 0; y < S; ++y)
                std::copy_n(scene.labels.begin() + static_cast<std::ptrdiff_t>((ty + y) * W + tx), S,
                            p.labels.begin() + static_cast<std::ptrdiff_t>(y * S));
            patches.push_back(std::move(p));
        }
    return patches;
}

std::string to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw UsageError("unknown split '" + s + "' (expected train, val or test)");
}

std::vector<const ManifestEntry*> DatasetManifest::split(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
        if (e.split == s) out.push_back(&e);
    return out;
}

std::array<std::size_t, 3> DatasetManifest::split_sizes() const {
    std::array<std::size_t, 3> sizes{};
    for (const auto& e : entries) ++sizes[static_cast<std::size_t>(e.split)];
    return sizes;
}

nlohmann::json DatasetManifest::to_json() const {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : entries)
        list.push_back({{"patch_id", e.patch_id}, {"path", e.path}, {"dominant_class", e.dominant_class},
                        {"split", to_string(e.split)}});
    return {{"entries", list},
            {"scheme", scheme.to_json()},
            {"seed", seed},
            {"ratios", ratios},
            {"too_few_patches", too_few_patches}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.scheme = ClassScheme::from_json(j.at("scheme"));
        m.seed = j.at("seed").get<std::uint64_t>();
        m.ratios = j.at("ratios").get<std::array<double, 3>>();
        m.too_few_patches = j.value("too_few_patches", false);
        for (const auto& e : j.at("entries"))
            m.entries.push_back({e.at("patch_id").get<std::string>(), e.at("path").get<std::string>(),
                                 e.at("dominant_class").get<int>(), split_from_string(e.at("split").get<std::string>())});
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest: ") + e.what());
    }
    return m;
}

DatasetManifest split_dataset(std::span<const Patch> patches, std::array<double, 3> ratios, std::uint64_t seed,
                              ClassScheme scheme) {
    for (double r : ratios)
        if (r < 0.0) throw UsageError("split: ratios must be non-negative");
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw UsageError("split: ratios must sum to 1");

    DatasetManifest m;
    m.scheme = std::move(scheme);
    m.seed = seed;
    m.ratios = ratios;
    const std::size_t n = patches.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }
    std::size_t n_train = n, n_val = 0;
    if (n < 3) {
        m.too_few_patches = true;
    } else {
        n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[0] + 1e-9));
        n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[1] + 1e-9));
    }
    for (std::size_t k = 0; k < n; ++k) {
        const Patch& p = patches[order[k]];
        const Split s = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
        m.entries.push_back({p.patch_id, "", p.dominant_class, s});
    }
    return m;
}

void write_patch(const std::filesystem::path& path, const Patch& patch) {
    patch.validate();
    auto out = io::open_out(path);
    io::write_header(out, {{"patch_id", patch.patch_id},
                           {"C", patch.channels},
                           {"H", patch.height},
                           {"W", patch.width},
                           {"has_labels", patch.has_labels()},
                           {"has_mask", patch.has_mask()},
                           {"dtype", "f32le"}});
    io::write_f32(out, patch.bands);
    if (patch.has_labels()) io::write_u8(out, patch.labels);
    if (patch.has_mask()) io::write_u8(out, patch.valid_mask);
    if (!out) throw DataError("failed writing " + path.string());
}

Patch read_patch(const std::filesystem::path& path) {
    auto in = io::open_in(path);
    const auto h = io::read_header(in, path);
    if (io::field<std::string>(h, "dtype", path) != "f32le") throw DataError("unsupported dtype in " + path.string());
    Patch p;
    p.patch_id = io::field<std::string>(h, "patch_id", path);
    p.channels = io::field<std::size_t>(h, "C", path);
    p.height = io::field<std::size_t>(h, "H", path);
    p.width = io::field<std::size_t>(h, "W", path);
    p.bands = io::read_f32(in, p.channels * p.pixels(), path);
    if (io::field<bool>(h, "has_labels", path)) p.labels = io::read_u8(in, p.pixels(), path);
    if (io::field<bool>(h, "has_mask", path)) p.valid_mask = io::read_u8(in, p.pixels(), path);
    return p;
}

void write_scene_bands(const std::filesystem::path& path, const Scene& scene) {
    auto out = io::open_out(path);
    io::write_header(out, {{"C", scene.channels}, {"H", scene.height}, {"W", scene.width}, {"dtype", "f32le"}});
    io::write_f32(out, scene.bands);
}

void write_scene_raster(const std::filesystem::path& path, std::size_t height, std::size_t width,
                        std::span<const std::uint8_t> raster) {
    if (raster.size() != height * width) throw DataError("raster does not match [H, W]");
    auto out = io::open_out(path);
    io::write_header(out, {{"H", height}, {"W", width}, {"dtype", "u8"}});
    io::write_u8(out, raster);
}

std::vector<std::uint8_t> read_scene_raster(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
    auto in = io::open_in(path);
    const auto h = io::read_header(in, path);
    if (io::field<std::string>(h, "dtype", path) != "u8") throw DataError("expected u8 raster in " + path.string());
    height = io::field<std::size_t>(h, "H", path);
    width = io::field<std::size_t>(h, "W", path);
    return io::read_u8(in, height * width, path);
}

Scene read_scene(const std::filesystem::path& bands, const std::filesystem::path& labels,
                 const std::filesystem::path& valid) {
    Scene s;
    {
        auto in = io::open_in(bands);
        const auto h = io::read_header(in, bands);
        if (io::field<std::string>(h, "dtype", bands) != "f32le") throw DataError("unsupported dtype in " + bands.string());
        s.channels = io::field<std::size_t>(h, "C", bands);
        s.height = io::field<std::size_t>(h, "H", bands);
        s.width = io::field<std::size_t>(h, "W", bands);
        s.bands = io::read_f32(in, s.channels * s.height * s.width, bands);
    }
    std::size_t lh = 0, lw = 0;
    s.labels = read_scene_raster(labels, lh, lw);
    if (lh != s.height || lw != s.width) throw DataError("label raster size differs from scene: " + labels.string());
    if (!valid.empty()) {
        s.valid_mask = read_scene_raster(valid, lh, lw);
        if (lh != s.height || lw != s.width) throw DataError("valid raster size differs from scene: " + valid.string());
    }
    return s;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
    io::write_json_file(path, manifest.to_json());
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw DataError("manifest not found: " + path.string());
    return DatasetManifest::from_json(io::read_json_file(path));
}

}  // namespace msom

#pragma once

// Patches, class schemes, PCA projection, patch extraction and dataset
// splitting, plus the on-disk patch/scene/manifest formats.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace msom {

// Label value for pixels with no reference class. Never counted as a class.
inline constexpr std::uint8_t kUnlabeled = 255;

using Rgb = std::array<std::uint8_t, 3>;

struct ClassInfo {
    std::size_t id = 0;
    std::string name;
    Rgb color{};
};

class ClassScheme {
public:
    ClassScheme() = default;
    // Throws DataError unless ids are 0..K-1 in order and names are unique.
    explicit ClassScheme(std::vector<ClassInfo> classes);

    // 13-class land-cover legend with its rendering palette.
    static ClassScheme land_cover();
    // First k land-cover classes (synthetic fixtures use small K).
    static ClassScheme land_cover_prefix(std::size_t k);

    std::size_t size() const { return classes_.size(); }
    const ClassInfo& operator[](std::size_t id) const { return classes_.at(id); }
    const std::vector<ClassInfo>& classes() const { return classes_; }
    std::optional<std::size_t> find_color(const Rgb& color) const;

    nlohmann::json to_json() const;
    static ClassScheme from_json(const nlohmann::json& j);

private:
    std::vector<ClassInfo> classes_;
};

struct Patch {
    std::string patch_id;
    std::size_t channels = 0, height = 0, width = 0;
    std::vector<float> bands;               // [C, H, W]
    std::vector<std::uint8_t> labels;       // [H, W] or empty
    std::vector<std::uint8_t> valid_mask;   // [H, W] or empty
    int dominant_class = -1;

    std::size_t pixels() const { return height * width; }
    bool has_labels() const { return !labels.empty(); }
    bool has_mask() const { return !valid_mask.empty(); }
    float band(std::size_t c, std::size_t y, std::size_t x) const { return bands[(c * height + y) * width + x]; }
    // Throws on inconsistent sizes or labels >= num_classes (other than kUnlabeled).
    void validate(std::size_t num_classes = 256) const;
};

struct PCImage {
    std::size_t height = 0, width = 0;
    std::vector<double> components;          // [n, H, W], mean-centered projections
    std::vector<double> explained_variance;  // n values, descending
    std::vector<std::vector<double>> axes;   // eigenvector per component, length C
    bool degenerate = false;                 // covariance rank < n; missing components are zero

    std::size_t count() const { return explained_variance.size(); }
    double at(std::size_t c, std::size_t y, std::size_t x) const { return components[(c * height + y) * width + x]; }
};

// Projects pixels (samples) onto the top-n eigenvectors of the band
// covariance. Each eigenvector's largest-magnitude entry is made positive.
PCImage pca_project(const Patch& patch, std::size_t n_components = 3);

struct Scene {
    std::size_t channels = 0, height = 0, width = 0;
    std::vector<float> bands;              // [C, H, W]
    std::vector<std::uint8_t> labels;      // [H, W]
    std::vector<std::uint8_t> valid_mask;  // [H, W]; empty means all valid
};

struct ExtractOptions {
    std::size_t size = 128;
    double dominance = 0.5;
    std::string id_prefix = "p";
};

// Non-overlapping size x size tiles in row-major order. A tile is kept when
// every pixel is valid and one class holds strictly more than `dominance` of
// the labeled pixels.
std::vector<Patch> extract_patches(const Scene& scene, const ExtractOptions& options = {});

enum class Split { train, val, test };
std::string to_string(Split split);
Split split_from_string(const std::string& s);

struct ManifestEntry {
    std::string patch_id;
    std::string path;
    int dominant_class = -1;
    Split split = Split::train;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    ClassScheme scheme;
    std::uint64_t seed = 0;
    std::array<double, 3> ratios{0.1, 0.1, 0.8};
    bool too_few_patches = false;  // fewer than 3 patches: everything went to train

    std::vector<const ManifestEntry*> split(Split s) const;
    std::array<std::size_t, 3> split_sizes() const;

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

// Seeded shuffle, then contiguous train/val/test assignment with
// floor(n*train), floor(n*val) and the remainder to test.
DatasetManifest split_dataset(std::span<const Patch> patches, std::array<double, 3> ratios, std::uint64_t seed,
                              ClassScheme scheme = ClassScheme::land_cover());

// On-disk formats: a UTF-8 JSON header line followed by raw little-endian data.
void write_patch(const std::filesystem::path& path, const Patch& patch);
Patch read_patch(const std::filesystem::path& path);
void write_scene_bands(const std::filesystem::path& path, const Scene& scene);
void write_scene_raster(const std::filesystem::path& path, std::size_t height, std::size_t width,
                        std::span<const std::uint8_t> raster);
// Loads bands plus labels and an optional validity raster (non-zero = valid).
Scene read_scene(const std::filesystem::path& bands, const std::filesystem::path& labels,
                 const std::filesystem::path& valid = {});
std::vector<std::uint8_t> read_scene_raster(const std::filesystem::path& path, std::size_t& height, std::size_t& width);

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);

}  // namespace msom

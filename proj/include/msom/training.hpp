#pragma once

// Losses, superpixel-level targets, batching, the training loop and the
// experiment harnesses built on it (loss-ratio sweep, ablation table).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msom/glocal.hpp"
#include "msom/metrics.hpp"
#include "msom/raster.hpp"
#include "msom/superpixel.hpp"

namespace msom {

struct TrainConfig {
    std::size_t batch_size = 32;
    double lr = 1e-3;
    std::size_t epochs = 50;
    std::size_t hidden = 64;
    double alpha = 0.7;
    double beta = 0.3;
    std::size_t n_sp_target = 500;
    std::size_t n_max = 600;
    std::uint64_t seed = 0;
    double compactness = 10.0;
    std::size_t slic_iters = 10;
    std::size_t d_state = 16;
    double grad_clip = 1.0;
    std::size_t max_steps = 0;  // 0: no cap
    bool superpixels = true;    // false: every pixel is a token (n_max = H*W)

    // Throws UsageError on unknown keys or invalid values.
    static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
    static TrainConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    void validate() const;
};

struct TokenTargets {
    std::vector<std::uint8_t> labels;  // [N_max]; kUnlabeled where masked
    std::vector<std::uint8_t> mask;    // [N_max]
};

// Majority pixel label per superpixel (smallest class id wins ties).
// Unlabeled pixels do not vote; a superpixel without labeled pixels is masked.
TokenTargets superpixel_targets(std::span<const std::uint8_t> labels, const SuperpixelMap& map, std::size_t n_max,
                                std::size_t num_classes);

// Mean of -log softmax(logits)[target] over positions, where positions are all
// index combinations except `class_axis`, in row-major order. Positions with
// target kUnlabeled or a zero mask entry are skipped. Throws DataError when
// nothing contributes.
Tensor cross_entropy(const Tensor& logits, std::size_t class_axis, std::span<const std::uint8_t> targets,
                     std::span<const std::uint8_t> mask = {});

// alpha * local + beta * global on scalar tensors.
Tensor combine_losses(const Tensor& local, const Tensor& global, double alpha, double beta);

struct LossParts {
    Tensor total, local, global;
};
// alpha * CE(m_local, pixel labels) + beta * CE(g_tokens, token labels)
LossParts multitask_loss(const GLocalOutputs& out, std::span<const std::uint8_t> pixel_labels,
                         std::span<const std::uint8_t> token_labels, std::span<const std::uint8_t> token_mask,
                         double alpha, double beta);

// Per-band standardization fitted on training patches.
struct Normalizer {
    std::vector<float> mean, stddev;

    static Normalizer fit(std::span<const Patch> patches);
    nlohmann::json to_json() const;
    static Normalizer from_json(const nlohmann::json& j);
};

struct Sample {
    Patch patch;
    SuperpixelMap sp;
};

SuperpixelMap compute_superpixels(const Patch& patch, const TrainConfig& config);

// Attaches superpixel maps, reading `<cache_dir>/<patch_id>.sp` when present.
std::vector<Sample> prepare_samples(std::vector<Patch> patches, const TrainConfig& config,
                                    const std::filesystem::path& cache_dir = {});

// Patches of one split, resolving entry paths against the manifest directory.
std::vector<Patch> load_split(const DatasetManifest& manifest, const std::filesystem::path& manifest_path, Split split);

struct Batch {
    Tensor x;                                // [B, C, H, W], normalized
    std::vector<SuperpixelMap> maps;
    std::vector<std::uint8_t> pixel_labels;  // [B*H*W]
    std::vector<std::uint8_t> token_labels;  // [B*N_max]
    std::vector<std::uint8_t> token_mask;    // [B*N_max]
};
Batch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices, const Normalizer& norm,
                 std::size_t n_max, std::size_t num_classes);

// Argmax over the class axis of [B, K, H, W] logits, lowest id on ties.
std::vector<std::uint8_t> predict_classes(const Tensor& logits);

struct Evaluation {
    ConfusionMatrix local, global, final;
};
Evaluation evaluate(const GLocalParams& params, std::span<const Sample> samples, const Normalizer& norm,
                    const TrainConfig& config);

nlohmann::json metrics_json(const ConfusionMatrix& cm, const ClassScheme* scheme = nullptr);

struct EpochLog {
    std::size_t epoch = 0, steps = 0;
    double train_loss = 0.0, train_local = 0.0, train_global = 0.0;
    MetricSummary val;
    double val_local_oa = 0.0, val_global_oa = 0.0;

    nlohmann::json to_json() const;
};

struct FitResult {
    GLocalParams final_params, best_params;
    Normalizer norm;
    std::vector<EpochLog> epochs;
    std::vector<double> step_losses;
    double best_val_oa = -1.0;
    std::size_t best_epoch = 0;
};

// Trains with Adam and global-norm clipping. When `out_dir` is set, writes
// train_log.jsonl, best.ckpt and final.ckpt there.
FitResult fit(std::span<const Sample> train, std::span<const Sample> val, const TrainConfig& config,
              std::size_t num_classes, const std::filesystem::path& out_dir = {});

struct RatioResult {
    std::string label;
    double alpha = 0.0, beta = 0.0;
    MetricSummary val;
};
// The loss-ratio grid, local:global.
std::vector<std::pair<double, double>> standard_ratio_grid();
std::vector<RatioResult> loss_ratio_sweep(std::span<const Sample> train, std::span<const Sample> val,
                                          const TrainConfig& config, std::size_t num_classes,
                                          const std::vector<std::pair<double, double>>& grid = standard_ratio_grid());

struct AblationRow {
    std::string variant;
    MetricSummary metrics;
    std::size_t sequence_length = 0;  // N_max tokens per patch
};
// local / global / voting from one trained model, plus a model retrained with
// pixel tokens. Metrics are computed on `eval`.
std::vector<AblationRow> ablation_suite(std::span<const Patch> train, std::span<const Patch> val,
                                        std::span<const Patch> eval, const TrainConfig& config,
                                        std::size_t num_classes, const std::filesystem::path& out_dir = {});
nlohmann::json ablation_json(const std::vector<AblationRow>& rows);

}  // namespace msom

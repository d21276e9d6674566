#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace msom {

// K x K counts; rows are reference classes, columns predicted classes.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t num_classes = 0);

    std::size_t num_classes() const { return k_; }
    std::uint64_t at(std::size_t reference, std::size_t predicted) const { return counts_[reference * k_ + predicted]; }
    std::uint64_t total() const;
    std::uint64_t row_sum(std::size_t c) const;
    std::uint64_t col_sum(std::size_t c) const;

    // Counts every pixel whose mask entry is set (an empty mask counts all).
    void accumulate(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels,
                    std::span<const std::uint8_t> valid_mask = {});
    void add(std::size_t reference, std::size_t predicted, std::uint64_t count = 1);
    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
    bool operator==(const ConfusionMatrix& other) const = default;

    static ConfusionMatrix from_counts(std::size_t num_classes, std::vector<std::uint64_t> counts);
    const std::vector<std::uint64_t>& counts() const { return counts_; }

private:
    std::size_t k_;
    std::vector<std::uint64_t> counts_;
};

double overall_accuracy(const ConfusionMatrix& cm);
// Classes with zero reference support are excluded from AA.
double average_accuracy(const ConfusionMatrix& cm);
double kappa(const ConfusionMatrix& cm);
// Classes with an empty union are excluded from mIoU.
double mean_iou(const ConfusionMatrix& cm);
// Per-class producer accuracy; NaN for zero-support classes.
std::vector<double> per_class_accuracy(const ConfusionMatrix& cm);
std::vector<double> per_class_iou(const ConfusionMatrix& cm);

struct MetricSummary {
    double oa = 0.0, aa = 0.0, kappa = 0.0, miou = 0.0;
};

MetricSummary summarize(const ConfusionMatrix& cm);

nlohmann::json to_json(const ConfusionMatrix& cm);
ConfusionMatrix confusion_from_json(const nlohmann::json& j);

}  // namespace msom

#include "msom/metrics.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "msom/error.hpp"

namespace msom {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t c) const {
    std::uint64_t t = 0;
    for (std::size_t j = 0; j < k_; ++j) t += at(c, j);
    return t;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t c) const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < k_; ++i) t += at(i, c);
    return t;
}

void ConfusionMatrix::add(std::size_t reference, std::size_t predicted, std::uint64_t count) {
    if (reference >= k_ || predicted >= k_)
        throw DataError("confusion matrix: class (" + std::to_string(reference) + ", " + std::to_string(predicted) +
                        ") out of range for K = " + std::to_string(k_));
    counts_[reference * k_ + predicted] += count;
}

void ConfusionMatrix::accumulate(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels,
                                 std::span<const std::uint8_t> valid_mask) {
    if (predictions.size() != labels.size() || (!valid_mask.empty() && valid_mask.size() != labels.size()))
        throw ShapeError("confusion matrix: predictions, labels and mask sizes differ");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (!valid_mask.empty() && !valid_mask[i]) continue;
        add(labels[i], predictions[i]);
    }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ShapeError("confusion matrix: cannot merge K = " + std::to_string(other.k_) +
                                         " into K = " + std::to_string(k_));
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
}

ConfusionMatrix ConfusionMatrix::from_counts(std::size_t num_classes, std::vector<std::uint64_t> counts) {
    if (counts.size() != num_classes * num_classes)
        throw ShapeError("confusion matrix: expected " + std::to_string(num_classes * num_classes) + " counts");
    ConfusionMatrix cm(num_classes);
    cm.counts_ = std::move(counts);
    return cm;
}

namespace {

double checked_total(const ConfusionMatrix& cm) {
    const auto t = cm.total();
    if (t == 0) throw DataError("metrics: confusion matrix is empty");
    return static_cast<double>(t);
}

}  // namespace

double overall_accuracy(const ConfusionMatrix& cm) {
    const double total = checked_total(cm);
    double trace = 0.0;
    for (std::size_t c = 0; c < cm.num_classes(); ++c) trace += static_cast<double>(cm.at(c, c));
    return trace / total;
}

std::vector<double> per_class_accuracy(const ConfusionMatrix& cm) {
    std::vector<double> acc(cm.num_classes(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < cm.num_classes(); ++c) {
        const auto row = cm.row_sum(c);
        if (row > 0) acc[c] = static_cast<double>(cm.at(c, c)) / static_cast<double>(row);
    }
    return acc;
}

double average_accuracy(const ConfusionMatrix& cm) {
    checked_total(cm);
    double sum = 0.0;
    std::size_t n = 0;
    for (double a : per_class_accuracy(cm)) {
        if (std::isnan(a)) continue;
        sum += a;
        ++n;
    }
    return sum / static_cast<double>(n);
}

double kappa(const ConfusionMatrix& cm) {
    const double total = checked_total(cm);
    const double po = overall_accuracy(cm);
    double pe = 0.0;
    for (std::size_t c = 0; c < cm.num_classes(); ++c)
        pe += static_cast<double>(cm.row_sum(c)) * static_cast<double>(cm.col_sum(c));
    pe /= total * total;
    // one class fills both marginals, so every count is on the diagonal
    if (pe >= 1.0) return 1.0;
    return (po - pe) / (1.0 - pe);
}

std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
    std::vector<double> iou(cm.num_classes(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < cm.num_classes(); ++c) {
        const double tp = static_cast<double>(cm.at(c, c));
        const double uni = static_cast<double>(cm.row_sum(c) + cm.col_sum(c)) - tp;
        if (uni > 0.0) iou[c] = tp / uni;
    }
    return iou;
}

double mean_iou(const ConfusionMatrix& cm) {
    checked_total(cm);
    double sum = 0.0;
    std::size_t n = 0;
    for (double v : per_class_iou(cm)) {
        if (std::isnan(v)) continue;
        sum += v;
        ++n;
    }
    return sum / static_cast<double>(n);
}

MetricSummary summarize(const ConfusionMatrix& cm) {
    return {overall_accuracy(cm), average_accuracy(cm), kappa(cm), mean_iou(cm)};
}

nlohmann::json to_json(const ConfusionMatrix& cm) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < cm.num_classes(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t j = 0; j < cm.num_classes(); ++j) row.push_back(cm.at(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

ConfusionMatrix confusion_from_json(const nlohmann::json& j) {
    const std::size_t k = j.size();
    std::vector<std::uint64_t> counts;
    for (const auto& row : j) {
        if (row.size() != k) throw DataError("confusion matrix json: not square");
        for (const auto& v : row) counts.push_back(v.get<std::uint64_t>());
    }
    return ConfusionMatrix::from_counts(k, std::move(counts));
}

}  // namespace msom

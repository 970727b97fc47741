#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hcct/infer.hpp"

namespace hcct {

// Rows are true classes, columns are predictions.
struct ConfusionMatrix {
    std::size_t num_classes = 0;
    std::vector<std::int64_t> counts;
    std::vector<std::string> class_names;

    explicit ConfusionMatrix(std::size_t classes = 0)
        : num_classes(classes), counts(classes * classes, 0) {
        for (std::size_t i = 0; i < classes; ++i) class_names.push_back("class" + std::to_string(i));
    }

    std::int64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * num_classes + pred]; }
    std::int64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * num_classes + pred]; }

    std::int64_t total() const {
        std::int64_t t = 0;
        for (std::int64_t c : counts) t += c;
        return t;
    }
    std::int64_t row_sum(std::size_t truth) const {
        std::int64_t t = 0;
        for (std::size_t p = 0; p < num_classes; ++p) t += at(truth, p);
        return t;
    }
    std::int64_t col_sum(std::size_t pred) const {
        std::int64_t t = 0;
        for (std::size_t r = 0; r < num_classes; ++r) t += at(r, pred);
        return t;
    }
};

enum class Averaging { Weighted, Macro };

struct MetricsSummary {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Accuracy plus per-class precision/recall/F1 combined by support-weighted
// (default) or macro averaging. A class never predicted takes precision 0.
MetricsSummary summarize(const ConfusionMatrix& cm, Averaging averaging = Averaging::Weighted);

void write_confusion_csv(const ConfusionMatrix& cm, const std::filesystem::path& path);
void write_metrics_csv(const MetricsSummary& s, const std::filesystem::path& path);
std::string format_metrics_table(const ConfusionMatrix& cm, const MetricsSummary& s);

// Evaluation-mode predictions over a split, tallied against the labels.
template <typename T>
ConfusionMatrix evaluate(HcctModel<T>& model, const std::vector<Volume>& split,
                         std::size_t batch_size = 4) {
    if (split.empty()) throw ContractError("evaluate: empty split");
    ConfusionMatrix cm(model.config.num_classes);
    std::vector<std::size_t> preds = predict(model, split, batch_size);
    for (std::size_t i = 0; i < split.size(); ++i) {
        int label = split[i].label;
        if (label < 0 || static_cast<std::size_t>(label) >= cm.num_classes) {
            throw ContractError("evaluate: volume '" + split[i].source_id +
                                "' has label outside [0, " + std::to_string(cm.num_classes) + ")");
        }
        ++cm.at(static_cast<std::size_t>(label), preds[i]);
    }
    return cm;
}

} // namespace hcct

#include "hcct/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace hcct {

MetricsSummary summarize(const ConfusionMatrix& cm, Averaging averaging) {
    std::int64_t total = cm.total();
    if (total <= 0) throw ContractError("summarize: confusion matrix is empty");
    std::size_t c = cm.num_classes;

    std::int64_t trace = 0;
    for (std::size_t i = 0; i < c; ++i) trace += cm.at(i, i);

    MetricsSummary s;
    s.accuracy = static_cast<double>(trace) / static_cast<double>(total);

    std::vector<double> precision(c, 0.0), recall(c, 0.0), f1(c, 0.0);
    for (std::size_t i = 0; i < c; ++i) {
        std::int64_t col = cm.col_sum(i), row = cm.row_sum(i), diag = cm.at(i, i);
        precision[i] = col > 0 ? static_cast<double>(diag) / static_cast<double>(col) : 0.0;
        recall[i] = row > 0 ? static_cast<double>(diag) / static_cast<double>(row) : 0.0;
        double pr = precision[i] + recall[i];
        f1[i] = pr > 0.0 ? 2.0 * precision[i] * recall[i] / pr : 0.0;
    }

    if (averaging == Averaging::Macro) {
        double sp = 0, sr = 0, sf = 0;
        for (std::size_t i = 0; i < c; ++i) {
            sp += precision[i];
            sr += recall[i];
            sf += f1[i];
        }
        s.precision = sp / static_cast<double>(c);
        s.recall = sr / static_cast<double>(c);
        s.f1 = sf / static_cast<double>(c);
        return s;
    }

    // Support-weighted averages. Recall is accumulated from the integer
    // counts: support * (diag / support) collapses to diag, which keeps the
    // recall == accuracy identity exact rather than within rounding.
    std::int64_t recall_numerator = 0;
    double wp = 0.0, wf = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
        std::int64_t row = cm.row_sum(i);
        if (row == 0) continue;
        recall_numerator += cm.at(i, i);
        wp += static_cast<double>(row) * precision[i];
        wf += static_cast<double>(row) * f1[i];
    }
    s.recall = static_cast<double>(recall_numerator) / static_cast<double>(total);
    s.precision = wp / static_cast<double>(total);
    s.f1 = wf / static_cast<double>(total);
    return s;
}

void write_confusion_csv(const ConfusionMatrix& cm, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("write_confusion_csv: cannot open " + path.string());
    os << "true\\pred";
    for (std::size_t p = 0; p < cm.num_classes; ++p) os << ',' << cm.class_names[p];
    os << '\n';
    for (std::size_t t = 0; t < cm.num_classes; ++t) {
        os << cm.class_names[t];
        for (std::size_t p = 0; p < cm.num_classes; ++p) os << ',' << cm.at(t, p);
        os << '\n';
    }
    if (!os) throw IoError("write_confusion_csv: write failed for " + path.string());
}

void write_metrics_csv(const MetricsSummary& s, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("write_metrics_csv: cannot open " + path.string());
    char buf[160];
    std::snprintf(buf, sizeof(buf), "accuracy,precision,recall,f1\n%.10g,%.10g,%.10g,%.10g\n",
                  s.accuracy, s.precision, s.recall, s.f1);
    os << buf;
    if (!os) throw IoError("write_metrics_csv: write failed for " + path.string());
}

std::string format_metrics_table(const ConfusionMatrix& cm, const MetricsSummary& s) {
    std::ostringstream os;
    os << "confusion matrix (rows = true, cols = predicted):\n";
    os << "            ";
    for (std::size_t p = 0; p < cm.num_classes; ++p) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%10s", cm.class_names[p].c_str());
        os << buf;
    }
    os << '\n';
    for (std::size_t t = 0; t < cm.num_classes; ++t) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%12s", cm.class_names[t].c_str());
        os << buf;
        for (std::size_t p = 0; p < cm.num_classes; ++p) {
            std::snprintf(buf, sizeof(buf), "%10lld", static_cast<long long>(cm.at(t, p)));
            os << buf;
        }
        os << '\n';
    }
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "accuracy  %.4f\nprecision %.4f\nrecall    %.4f\nf1        %.4f\n", s.accuracy,
                  s.precision, s.recall, s.f1);
    os << buf;
    return os.str();
}

} // namespace hcct

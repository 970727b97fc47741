#include "hcct/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "hcct/error.hpp"

namespace hcct {

namespace {

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

} // namespace

void write_train_report(const TrainReport& report, const std::filesystem::path& csv_path,
                        const std::filesystem::path& timing_path) {
    std::ofstream os(csv_path);
    if (!os) throw IoError("write_train_report: cannot open " + csv_path.string());
    os << "epoch,lr,train_loss,train_acc,val_acc\n";
    for (const EpochStats& e : report.epochs) {
        os << e.epoch << ',' << fmt(e.lr) << ',' << fmt(e.train_loss) << ',' << fmt(e.train_acc)
           << ',' << fmt(e.val_acc) << '\n';
    }
    if (!os) throw IoError("write_train_report: write failed for " + csv_path.string());

    std::ofstream ts(timing_path);
    if (!ts) throw IoError("write_train_report: cannot open " + timing_path.string());
    ts << "epoch,seconds\n";
    for (const EpochStats& e : report.epochs) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.3f", e.seconds);
        ts << e.epoch << ',' << buf << '\n';
    }
}

} // namespace hcct

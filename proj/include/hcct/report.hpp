#pragma once

#include <filesystem>
#include <vector>

namespace hcct {

struct EpochStats {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_acc = 0.0; // NaN when no validation split
    double seconds = 0.0; // wall time, exported separately to keep the report reproducible
};

struct TrainReport {
    std::vector<EpochStats> epochs;
};

// Writes `epoch,lr,train_loss,train_acc,val_acc` to `csv_path` (deterministic
// given the run) and `epoch,seconds` to `timing_path` (wall clock, varies).
void write_train_report(const TrainReport& report, const std::filesystem::path& csv_path,
                        const std::filesystem::path& timing_path);

} // namespace hcct

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hcct/error.hpp"

namespace hcct {

// One cubic scan. Voxels are stored raster-order, z-major:
// index = (z * E + y) * E + x.
struct Volume {
    std::size_t extent = 0;
    std::vector<float> voxels;
    int label = -1; // -1 = unlabeled
    std::string source_id;

    float at(std::size_t z, std::size_t y, std::size_t x) const {
        return voxels[(z * extent + y) * extent + x];
    }
    float& at(std::size_t z, std::size_t y, std::size_t x) {
        return voxels[(z * extent + y) * extent + x];
    }
};

// HVOL container: "HVOL" magic, u32 version, three u32 extents, then
// extent^3 32-bit little-endian floats.
void save_volume(const Volume& v, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);

// Corner-aligned trilinear resampling to a new cubic extent.
Volume resize(const Volume& v, std::size_t target_extent);

// Min-max rescale to [0, 1]. A constant volume has no usable range.
Volume normalize_intensity(const Volume& v);

enum class SplitKind { Train, Val, Test };

const char* split_name(SplitKind kind);
SplitKind parse_split(const std::string& name);

struct ManifestEntry {
    std::string path; // relative to the manifest's directory unless absolute
    int label = -1;
    SplitKind split = SplitKind::Train;
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    std::filesystem::path base_dir;

    std::vector<const ManifestEntry*> split(SplitKind kind) const;
    std::filesystem::path resolve(const ManifestEntry& entry) const;
};

// CSV with header `path,label,split`.
void save_manifest(const Manifest& m, const std::filesystem::path& path);
Manifest load_manifest(const std::filesystem::path& path);

std::vector<Volume> load_split(const Manifest& m, SplitKind kind);

struct SplitFractions {
    double train = 0.7;
    double val = 0.15;
    double test = 0.15;
};

// Per-class partition at the given fractions with largest-remainder rounding
// and a seeded shuffle. Every class needs at least as many items as there
// are splits with a nonzero fraction.
Manifest stratified_split(const std::vector<std::pair<std::string, int>>& items,
                          const SplitFractions& fractions, std::uint64_t seed);

// Deterministic stand-in dataset: class k is a Gaussian blob whose radius and
// center offset depend on k, plus seeded noise (sigma 0.05), min-max
// normalized. Classes are linearly separable by construction.
std::vector<Volume> synth_dataset(std::size_t num_per_class, std::size_t extent,
                                  std::size_t num_classes, std::uint64_t seed);

} // namespace hcct

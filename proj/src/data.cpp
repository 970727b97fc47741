#include "hcct/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "hcct/io_util.hpp"
#include "hcct/ops3d.hpp"
#include "hcct/rng.hpp"

namespace hcct {

namespace {

constexpr char kVolumeMagic[4] = {'H', 'V', 'O', 'L'};
constexpr std::uint32_t kVolumeVersion = 1;

} // namespace

void save_volume(const Volume& v, const std::filesystem::path& path) {
    if (v.voxels.size() != v.extent * v.extent * v.extent) {
        throw ContractError("save_volume: voxel count does not match extent " +
                            std::to_string(v.extent));
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_volume: cannot open " + path.string() + " for writing");
    os.write(kVolumeMagic, 4);
    io::write_u32(os, kVolumeVersion);
    io::write_u32(os, static_cast<std::uint32_t>(v.extent));
    io::write_u32(os, static_cast<std::uint32_t>(v.extent));
    io::write_u32(os, static_cast<std::uint32_t>(v.extent));
    for (float f : v.voxels) io::write_f32(os, f);
    if (!os) throw IoError("save_volume: write failed for " + path.string());
}

Volume load_volume(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_volume: cannot open " + path.string());
    char magic[4] = {};
    if (!is.read(magic, 4) || std::memcmp(magic, kVolumeMagic, 4) != 0) {
        throw ParseError("load_volume: bad magic in " + path.string() + " (expected HVOL)");
    }
    std::uint32_t version = io::read_u32(is, "load_volume header");
    if (version != kVolumeVersion) {
        throw ParseError("load_volume: unsupported version " + std::to_string(version));
    }
    std::uint32_t d = io::read_u32(is, "load_volume header");
    std::uint32_t h = io::read_u32(is, "load_volume header");
    std::uint32_t w = io::read_u32(is, "load_volume header");
    if (d != h || h != w || d == 0) {
        throw ParseError("load_volume: volume is not a cube: " + std::to_string(d) + "x" +
                         std::to_string(h) + "x" + std::to_string(w));
    }
    std::size_t count = static_cast<std::size_t>(d) * h * w;
    std::vector<float> voxels(count);
    std::vector<char> raw(count * 4);
    is.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    std::size_t got = static_cast<std::size_t>(is.gcount());
    if (got != raw.size()) {
        throw ParseError("load_volume: truncated voxel payload in " + path.string() +
                         ": expected " + std::to_string(raw.size()) + " bytes, got " +
                         std::to_string(got));
    }
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = static_cast<std::uint8_t>(raw[i * 4]) |
                             (static_cast<std::uint32_t>(static_cast<std::uint8_t>(raw[i * 4 + 1])) << 8) |
                             (static_cast<std::uint32_t>(static_cast<std::uint8_t>(raw[i * 4 + 2])) << 16) |
                             (static_cast<std::uint32_t>(static_cast<std::uint8_t>(raw[i * 4 + 3])) << 24);
        voxels[i] = std::bit_cast<float>(bits);
        if (!std::isfinite(voxels[i])) {
            throw NumericError("load_volume: non-finite voxel in " + path.string());
        }
    }
    Volume v;
    v.extent = d;
    v.voxels = std::move(voxels);
    v.source_id = path.stem().string();
    return v;
}

Volume resize(const Volume& v, std::size_t target_extent) {
    if (target_extent < 1) throw ValueError("resize: target extent must be >= 1");
    if (target_extent == v.extent) return v;
    NoGradGuard guard;
    Tensor<float> t = Tensor<float>::from_data({v.extent, v.extent, v.extent}, v.voxels);
    Tensor<float> r = trilinear_resize3d(t, target_extent, target_extent, target_extent);
    Volume out;
    out.extent = target_extent;
    out.voxels = r.data();
    out.label = v.label;
    out.source_id = v.source_id;
    return out;
}

Volume normalize_intensity(const Volume& v) {
    auto [mn, mx] = std::minmax_element(v.voxels.begin(), v.voxels.end());
    if (v.voxels.empty() || !(*mx > *mn)) {
        throw NumericError("normalize_intensity: constant volume has no intensity range");
    }
    float lo = *mn, range = *mx - *mn;
    Volume out = v;
    for (float& f : out.voxels) f = (f - lo) / range;
    return out;
}

const char* split_name(SplitKind kind) {
    switch (kind) {
        case SplitKind::Train: return "train";
        case SplitKind::Val: return "val";
        case SplitKind::Test: return "test";
    }
    return "?";
}

SplitKind parse_split(const std::string& name) {
    if (name == "train") return SplitKind::Train;
    if (name == "val") return SplitKind::Val;
    if (name == "test") return SplitKind::Test;
    throw ParseError("unknown split '" + name + "' (expected train, val, or test)");
}

std::vector<const ManifestEntry*> Manifest::split(SplitKind kind) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries) {
        if (e.split == kind) out.push_back(&e);
    }
    return out;
}

std::filesystem::path Manifest::resolve(const ManifestEntry& entry) const {
    std::filesystem::path p(entry.path);
    return p.is_absolute() ? p : base_dir / p;
}

void save_manifest(const Manifest& m, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("save_manifest: cannot open " + path.string() + " for writing");
    os << "path,label,split\n";
    for (const auto& e : m.entries) {
        os << e.path << ',' << e.label << ',' << split_name(e.split) << '\n';
    }
    if (!os) throw IoError("save_manifest: write failed for " + path.string());
}

Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("load_manifest: cannot open " + path.string());
    Manifest m;
    m.base_dir = path.parent_path();
    std::string line;
    if (!std::getline(is, line) || line != "path,label,split") {
        throw ParseError("load_manifest: missing `path,label,split` header in " + path.string());
    }
    std::size_t line_no = 1;
    std::map<std::string, bool> seen;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::size_t c1 = line.find(',');
        std::size_t c2 = line.rfind(',');
        if (c1 == std::string::npos || c2 == c1) {
            throw ParseError("load_manifest: malformed line " + std::to_string(line_no));
        }
        ManifestEntry e;
        e.path = line.substr(0, c1);
        try {
            e.label = std::stoi(line.substr(c1 + 1, c2 - c1 - 1));
        } catch (const std::exception&) {
            throw ParseError("load_manifest: bad label on line " + std::to_string(line_no));
        }
        e.split = parse_split(line.substr(c2 + 1));
        if (seen.count(e.path)) {
            throw ParseError("load_manifest: duplicate path '" + e.path + "'");
        }
        seen[e.path] = true;
        m.entries.push_back(std::move(e));
    }
    return m;
}

std::vector<Volume> load_split(const Manifest& m, SplitKind kind) {
    std::vector<Volume> out;
    for (const ManifestEntry* e : m.split(kind)) {
        Volume v = load_volume(m.resolve(*e));
        v.label = e->label;
        out.push_back(std::move(v));
    }
    return out;
}

Manifest stratified_split(const std::vector<std::pair<std::string, int>>& items,
                          const SplitFractions& fractions, std::uint64_t seed) {
    const double fr[3] = {fractions.train, fractions.val, fractions.test};
    double total = fr[0] + fr[1] + fr[2];
    if (fr[0] < 0 || fr[1] < 0 || fr[2] < 0 || std::abs(total - 1.0) > 1e-9) {
        throw ValueError("stratified_split: fractions must be non-negative and sum to 1");
    }
    std::size_t active = 0;
    for (double f : fr) {
        if (f > 0) ++active;
    }

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < items.size(); ++i) by_class[items[i].second].push_back(i);

    Manifest m;
    m.entries.resize(items.size());
    Rng root(seed);
    for (auto& [label, indices] : by_class) {
        if (indices.size() < active) {
            throw ContractError("stratified_split: class " + std::to_string(label) + " has " +
                                std::to_string(indices.size()) + " items for " +
                                std::to_string(active) + " splits");
        }
        Rng rng = root.derive("split", static_cast<std::uint64_t>(label));
        rng.shuffle(indices);

        // Largest-remainder apportionment; ties go to the earlier split.
        std::size_t n = indices.size();
        std::size_t counts[3];
        double remainders[3];
        std::size_t assigned = 0;
        for (int s = 0; s < 3; ++s) {
            double ideal = static_cast<double>(n) * fr[s];
            counts[s] = static_cast<std::size_t>(ideal);
            remainders[s] = ideal - static_cast<double>(counts[s]);
            assigned += counts[s];
        }
        while (assigned < n) {
            int best = 0;
            for (int s = 1; s < 3; ++s) {
                if (remainders[s] > remainders[best]) best = s;
            }
            ++counts[best];
            remainders[best] = -1.0;
            ++assigned;
        }

        std::size_t cursor = 0;
        const SplitKind kinds[3] = {SplitKind::Train, SplitKind::Val, SplitKind::Test};
        for (int s = 0; s < 3; ++s) {
            for (std::size_t i = 0; i < counts[s]; ++i, ++cursor) {
                std::size_t item = indices[cursor];
                m.entries[item] = ManifestEntry{items[item].first, items[item].second, kinds[s]};
            }
        }
    }
    return m;
}

std::vector<Volume> synth_dataset(std::size_t num_per_class, std::size_t extent,
                                  std::size_t num_classes, std::uint64_t seed) {
    if (extent < 2) throw ValueError("synth_dataset: extent must be >= 2");
    std::vector<Volume> out;
    out.reserve(num_per_class * num_classes);
    Rng root(seed);
    double e = static_cast<double>(extent);
    for (std::size_t k = 0; k < num_classes; ++k) {
        // Blob geometry varies per class: radius grows with k and the center
        // shifts along axis k mod 3.
        double radius = e * (0.14 + 0.06 * static_cast<double>(k));
        double center[3] = {e / 2.0, e / 2.0, e / 2.0};
        center[k % 3] += e * 0.12 * (k % 2 == 0 ? 1.0 : -1.0);
        for (std::size_t i = 0; i < num_per_class; ++i) {
            Rng rng = root.derive("synth", (static_cast<std::uint64_t>(k) << 32) | i);
            Volume v;
            v.extent = extent;
            v.voxels.resize(extent * extent * extent);
            v.label = static_cast<int>(k);
            {
                std::ostringstream id;
                id << "class" << k << '_';
                id.width(3);
                id.fill('0');
                id << i;
                v.source_id = id.str();
            }
            std::size_t idx = 0;
            for (std::size_t z = 0; z < extent; ++z) {
                for (std::size_t y = 0; y < extent; ++y) {
                    for (std::size_t x = 0; x < extent; ++x, ++idx) {
                        double dz = static_cast<double>(z) - center[0];
                        double dy = static_cast<double>(y) - center[1];
                        double dx = static_cast<double>(x) - center[2];
                        double dist2 = dz * dz + dy * dy + dx * dx;
                        double value = std::exp(-dist2 / (2.0 * radius * radius));
                        value += 0.05 * rng.next_normal();
                        v.voxels[idx] = static_cast<float>(value);
                    }
                }
            }
            out.push_back(normalize_intensity(v));
        }
    }
    return out;
}

} // namespace hcct

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "hcct/data.hpp"
#include "test_support.hpp"

using namespace hcct;

namespace {

Volume make_volume(std::size_t extent, std::uint64_t seed) {
    Rng rng(seed);
    Volume v;
    v.extent = extent;
    v.voxels.resize(extent * extent * extent);
    for (float& f : v.voxels) f = static_cast<float>(rng.next_uniform());
    v.label = 1;
    v.source_id = "test";
    return v;
}

} // namespace

TEST_CASE("hvol round-trip is bit-exact") {
    auto dir = testing::make_temp_dir("hvol");
    Volume v = make_volume(6, 3);
    save_volume(v, dir / "a.hvol");
    Volume loaded = load_volume(dir / "a.hvol");
    CHECK(loaded.extent == v.extent);
    CHECK(loaded.voxels == v.voxels);
    save_volume(loaded, dir / "b.hvol");
    CHECK(testing::read_file_bytes(dir / "a.hvol") == testing::read_file_bytes(dir / "b.hvol"));
}

TEST_CASE("hvol loader reports truncation with byte counts") {
    auto dir = testing::make_temp_dir("hvol_trunc");
    Volume v = make_volume(4, 5);
    save_volume(v, dir / "full.hvol");
    std::string bytes = testing::read_file_bytes(dir / "full.hvol");
    {
        std::ofstream os(dir / "cut.hvol", std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 10));
    }
    try {
        load_volume(dir / "cut.hvol");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        std::string msg = e.what();
        CHECK(msg.find("256") != std::string::npos); // expected payload bytes (4^3 * 4)
        CHECK(msg.find("246") != std::string::npos); // actual
    }
}

TEST_CASE("hvol loader rejects bad magic and non-cubes") {
    auto dir = testing::make_temp_dir("hvol_bad");
    {
        std::ofstream os(dir / "bad.hvol", std::ios::binary);
        os << "XVOLgarbagegarbage";
    }
    CHECK_THROWS_AS(load_volume(dir / "bad.hvol"), ParseError);

    {
        std::ofstream os(dir / "rect.hvol", std::ios::binary);
        os << "HVOL";
        auto u32 = [&os](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
        u32(1);
        u32(2);
        u32(2);
        u32(3); // not a cube
        for (int i = 0; i < 12; ++i) u32(0);
    }
    CHECK_THROWS_AS(load_volume(dir / "rect.hvol"), ParseError);
    CHECK_THROWS_AS(load_volume(dir / "missing.hvol"), IoError);
}

TEST_CASE("resize preserves constants and is the identity at equal extents") {
    Volume v;
    v.extent = 8;
    v.voxels.assign(8 * 8 * 8, 0.625f);
    Volume small = resize(v, 6);
    CHECK(small.extent == 6);
    for (float f : small.voxels) CHECK(f == doctest::Approx(0.625f));
    Volume same = resize(v, 8);
    CHECK(same.voxels == v.voxels);
}

TEST_CASE("resize keeps an axis ramp monotone") {
    std::size_t e = 9;
    Volume v;
    v.extent = e;
    v.voxels.resize(e * e * e);
    for (std::size_t z = 0; z < e; ++z) {
        for (std::size_t y = 0; y < e; ++y) {
            for (std::size_t x = 0; x < e; ++x) v.at(z, y, x) = static_cast<float>(z);
        }
    }
    Volume out = resize(v, 6);
    for (std::size_t z = 0; z + 1 < 6; ++z) {
        CHECK(out.at(z, 2, 3) <= out.at(z + 1, 2, 3));
    }
    Volume up = resize(v, 13);
    for (std::size_t z = 0; z + 1 < 13; ++z) {
        CHECK(up.at(z, 5, 7) <= up.at(z + 1, 5, 7));
    }
}

TEST_CASE("normalize_intensity rescales to the unit interval") {
    Volume w;
    w.extent = 3;
    w.voxels.assign(27, 2.0f);
    w.voxels[1] = 4.0f;
    w.voxels[2] = 6.0f;
    Volume n = normalize_intensity(w);
    CHECK(n.voxels[0] == doctest::Approx(0.0f));
    CHECK(n.voxels[1] == doctest::Approx(0.5f));
    CHECK(n.voxels[2] == doctest::Approx(1.0f));

    Volume again = normalize_intensity(n);
    CHECK(again.voxels == n.voxels); // idempotent once in [0, 1] with 0 and 1 attained
}

TEST_CASE("normalize_intensity rejects constant volumes") {
    Volume v;
    v.extent = 2;
    v.voxels.assign(8, 3.0f);
    CHECK_THROWS_AS(normalize_intensity(v), NumericError);
}

TEST_CASE("stratified split: fractions, rounding, determinism") {
    std::vector<std::pair<std::string, int>> items;
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < 20; ++i) {
            items.emplace_back("c" + std::to_string(c) + "_" + std::to_string(i), c);
        }
    }
    Manifest m = stratified_split(items, SplitFractions{0.7, 0.15, 0.15}, 9);
    REQUIRE(m.entries.size() == items.size());

    std::map<int, std::map<SplitKind, int>> counts;
    std::set<std::string> seen;
    for (const auto& e : m.entries) {
        counts[e.label][e.split]++;
        CHECK(seen.insert(e.path).second); // disjoint and exhaustive
    }
    for (int c = 0; c < 3; ++c) {
        CHECK(counts[c][SplitKind::Train] == 14);
        CHECK(counts[c][SplitKind::Val] == 3);
        CHECK(counts[c][SplitKind::Test] == 3);
    }

    Manifest m2 = stratified_split(items, SplitFractions{0.7, 0.15, 0.15}, 9);
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        CHECK(m.entries[i].split == m2.entries[i].split);
    }
}

TEST_CASE("stratified split boundary and error cases") {
    std::vector<std::pair<std::string, int>> items;
    for (int i = 0; i < 5; ++i) items.emplace_back("a" + std::to_string(i), 0);
    Manifest all_train = stratified_split(items, SplitFractions{1.0, 0.0, 0.0}, 1);
    for (const auto& e : all_train.entries) CHECK(e.split == SplitKind::Train);

    CHECK_THROWS_AS(stratified_split(items, SplitFractions{0.5, 0.2, 0.2}, 1), ValueError);

    std::vector<std::pair<std::string, int>> tiny{{"only", 0}, {"two", 0}};
    CHECK_THROWS_AS(stratified_split(tiny, SplitFractions{0.7, 0.15, 0.15}, 1), ContractError);
}

TEST_CASE("per-class split counts deviate from exact fractions by less than one") {
    Rng rng(15);
    std::vector<std::pair<std::string, int>> items;
    std::map<int, int> per_class;
    for (int i = 0; i < 137; ++i) {
        int c = static_cast<int>(rng.next_below(4));
        items.emplace_back("x" + std::to_string(i), c);
        per_class[c]++;
    }
    SplitFractions fr{0.6, 0.2, 0.2};
    Manifest m = stratified_split(items, fr, 3);
    std::map<int, std::map<SplitKind, int>> counts;
    for (const auto& e : m.entries) counts[e.label][e.split]++;
    const double fracs[3] = {fr.train, fr.val, fr.test};
    const SplitKind kinds[3] = {SplitKind::Train, SplitKind::Val, SplitKind::Test};
    for (auto& [c, n] : per_class) {
        for (int s = 0; s < 3; ++s) {
            double ideal = n * fracs[s];
            CHECK(std::abs(counts[c][kinds[s]] - ideal) < 1.0);
        }
    }
}

TEST_CASE("manifest round-trip and duplicate detection") {
    auto dir = testing::make_temp_dir("manifest");
    Manifest m;
    m.base_dir = dir;
    m.entries.push_back({"vols/a.hvol", 0, SplitKind::Train});
    m.entries.push_back({"vols/b.hvol", 2, SplitKind::Test});
    save_manifest(m, dir / "manifest.csv");
    Manifest loaded = load_manifest(dir / "manifest.csv");
    REQUIRE(loaded.entries.size() == 2);
    CHECK(loaded.entries[0].path == "vols/a.hvol");
    CHECK(loaded.entries[0].label == 0);
    CHECK(loaded.entries[1].split == SplitKind::Test);
    CHECK(loaded.base_dir == dir);

    {
        std::ofstream os(dir / "dup.csv");
        os << "path,label,split\nx,0,train\nx,1,val\n";
    }
    CHECK_THROWS_AS(load_manifest(dir / "dup.csv"), ParseError);
    {
        std::ofstream os(dir / "nohdr.csv");
        os << "a,b\n";
    }
    CHECK_THROWS_AS(load_manifest(dir / "nohdr.csv"), ParseError);
}

TEST_CASE("synthetic dataset is deterministic with uniform labels") {
    auto a = synth_dataset(3, 12, 3, 21);
    auto b = synth_dataset(3, 12, 3, 21);
    REQUIRE(a.size() == 9);
    std::map<int, int> labels;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].voxels == b[i].voxels);
        CHECK(a[i].source_id == b[i].source_id);
        labels[a[i].label]++;
        for (float f : a[i].voxels) {
            CHECK(f >= 0.0f);
            CHECK(f <= 1.0f);
            CHECK(std::isfinite(f));
        }
    }
    for (auto& [label, count] : labels) CHECK(count == 3);

    auto c = synth_dataset(3, 12, 3, 22);
    CHECK(c[0].voxels != a[0].voxels);
}

TEST_CASE("synthetic class means are separated well beyond the noise floor") {
    std::size_t per_class = 6, extent = 16, classes = 3;
    auto vols = synth_dataset(per_class, extent, classes, 33);
    std::size_t n = extent * extent * extent;
    std::vector<std::vector<double>> means(classes, std::vector<double>(n, 0.0));
    for (const Volume& v : vols) {
        for (std::size_t i = 0; i < n; ++i) means[v.label][i] += v.voxels[i] / per_class;
    }
    double sigma = 0.05;
    for (std::size_t a = 0; a < classes; ++a) {
        for (std::size_t b = a + 1; b < classes; ++b) {
            double dist2 = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double d = means[a][i] - means[b][i];
                dist2 += d * d;
            }
            CHECK(std::sqrt(dist2) > 10.0 * sigma);
        }
    }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hcct/metrics.hpp"
#include "hcct/train.hpp"
#include "test_support.hpp"

using namespace hcct;

TEST_CASE("perfect predictor gives the identity on every metric") {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 5;
    cm.at(1, 1) = 5;
    MetricsSummary s = summarize(cm);
    CHECK(s.accuracy == 1.0);
    CHECK(s.precision == 1.0);
    CHECK(s.recall == 1.0);
    CHECK(s.f1 == 1.0);
}

TEST_CASE("hand-evaluated 2x2 case") {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 2;
    cm.at(0, 1) = 1;
    cm.at(1, 0) = 1;
    cm.at(1, 1) = 2;
    MetricsSummary s = summarize(cm);
    CHECK(s.accuracy == doctest::Approx(4.0 / 6.0));
    CHECK(s.recall == doctest::Approx(4.0 / 6.0));
    CHECK(s.precision == doctest::Approx(4.0 / 6.0));
}

TEST_CASE("constant predictor fills a single column") {
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 4;
    cm.at(1, 0) = 3;
    cm.at(2, 0) = 3;
    MetricsSummary s = summarize(cm);
    CHECK(s.accuracy == doctest::Approx(0.4));
    CHECK(s.recall == doctest::Approx(0.4));
    // classes 1 and 2 are never predicted: precision contribution 0
    CHECK(s.precision == doctest::Approx(0.4 * 0.4));
}

TEST_CASE("zero-total matrix is rejected") {
    ConfusionMatrix cm(3);
    CHECK_THROWS_AS(summarize(cm), ContractError);
}

TEST_CASE("weighted recall equals accuracy exactly for 1000 random matrices") {
    Rng rng(29);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t c = 2 + rng.next_below(5);
        ConfusionMatrix cm(c);
        for (std::size_t i = 0; i < c * c; ++i) {
            cm.counts[i] = static_cast<std::int64_t>(rng.next_below(40));
        }
        if (cm.total() == 0) cm.at(0, 0) = 1;
        MetricsSummary s = summarize(cm);
        CHECK(s.recall == s.accuracy); // exact, not approximate
        CHECK(s.accuracy >= 0.0);
        CHECK(s.accuracy <= 1.0);
        CHECK(s.precision >= 0.0);
        CHECK(s.precision <= 1.0);
        CHECK(s.f1 >= 0.0);
        CHECK(s.f1 <= 1.0);
    }
}

TEST_CASE("metrics are invariant to permuting class order") {
    Rng rng(31);
    ConfusionMatrix cm(4);
    for (std::size_t i = 0; i < 16; ++i) cm.counts[i] = static_cast<std::int64_t>(rng.next_below(30));
    cm.at(0, 0) += 1;
    MetricsSummary s = summarize(cm);

    // apply a fixed permutation to rows and columns
    std::vector<std::size_t> perm{2, 0, 3, 1};
    ConfusionMatrix pm(4);
    for (std::size_t t = 0; t < 4; ++t) {
        for (std::size_t p = 0; p < 4; ++p) pm.at(perm[t], perm[p]) = cm.at(t, p);
    }
    MetricsSummary s2 = summarize(pm);
    CHECK(s2.accuracy == doctest::Approx(s.accuracy).epsilon(1e-12));
    CHECK(s2.precision == doctest::Approx(s.precision).epsilon(1e-12));
    CHECK(s2.recall == doctest::Approx(s.recall).epsilon(1e-12));
    CHECK(s2.f1 == doctest::Approx(s.f1).epsilon(1e-12));
}

TEST_CASE("macro averaging differs from weighted under imbalance") {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 90;
    cm.at(0, 1) = 0;
    cm.at(1, 0) = 5;
    cm.at(1, 1) = 5;
    MetricsSummary weighted = summarize(cm, Averaging::Weighted);
    MetricsSummary macro = summarize(cm, Averaging::Macro);
    CHECK(weighted.recall == weighted.accuracy);
    CHECK(macro.recall == doctest::Approx(0.75)); // (1.0 + 0.5) / 2
    CHECK(macro.recall != weighted.recall);
}

TEST_CASE("evaluate tallies one count per sample and rejects empty splits") {
    ModelConfig cfg;
    cfg.input_extent = 8;
    cfg.conv_channels = {4, 8};
    cfg.embed_dim = 8;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.num_classes = 3;
    HcctModel<float> model = HcctModel<float>::init(cfg, 1);
    auto vols = synth_dataset(3, 8, 3, 5);
    ConfusionMatrix cm = evaluate(model, vols);
    CHECK(cm.total() == static_cast<std::int64_t>(vols.size()));
    for (std::size_t t = 0; t < 3; ++t) CHECK(cm.row_sum(t) == 3);

    CHECK_THROWS_AS(evaluate(model, std::vector<Volume>{}), ContractError);
}

TEST_CASE("confusion and metrics files are written and parse back") {
    auto dir = testing::make_temp_dir("metrics");
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 3;
    cm.at(1, 1) = 4;
    cm.at(1, 0) = 1;
    write_confusion_csv(cm, dir / "confusion.csv");
    write_metrics_csv(summarize(cm), dir / "metrics.csv");
    std::string conf = testing::read_file_bytes(dir / "confusion.csv");
    CHECK(conf.find("class0") != std::string::npos);
    CHECK(conf.find("3") != std::string::npos);
    std::string met = testing::read_file_bytes(dir / "metrics.csv");
    CHECK(met.rfind("accuracy,precision,recall,f1\n", 0) == 0);
    std::string table = format_metrics_table(cm, summarize(cm));
    CHECK(table.find("accuracy") != std::string::npos);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hcct/train.hpp"
#include "test_support.hpp"

using namespace hcct;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.input_extent = 8;
    cfg.conv_channels = {4, 8};
    cfg.embed_dim = 8;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.num_classes = 3;
    return cfg;
}

TrainConfig tiny_train(std::size_t epochs) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.decay_step = 20;
    cfg.seed = 11;
    return cfg;
}

std::uint64_t group_hash(HcctModel<float>& model, const std::string& prefix) {
    std::uint64_t h = 0;
    for (auto& [name, p] : model.named_parameters()) {
        if (name.rfind(prefix, 0) == 0) h ^= testing::hash_values(p.data());
    }
    for (auto& [name, buf] : model.named_buffers()) {
        if (name.rfind(prefix, 0) == 0) h ^= testing::hash_values(*buf);
    }
    return h;
}

} // namespace

TEST_CASE("lr schedule follows step decay") {
    TrainConfig cfg; // defaults: lr 4e-5, decay_step 50, gamma 0.1
    CHECK(lr_at(0, cfg) == doctest::Approx(4e-5));
    CHECK(lr_at(49, cfg) == doctest::Approx(4e-5));
    CHECK(lr_at(50, cfg) == doctest::Approx(4e-6));
    CHECK(lr_at(120, cfg) == doctest::Approx(4e-7));
}

TEST_CASE("adamw zero gradient applies exactly the decoupled decay") {
    Tensor<float> w = Tensor<float>::from_data({3}, {1.0f, -2.0f, 0.5f});
    w.set_requires_grad(true);
    std::vector<float> before = w.data();
    TrainConfig cfg;
    cfg.weight_decay = 0.01;
    AdamW<float> opt({{"w", w}}, cfg);
    double lr = 0.1;
    opt.step(lr);
    float factor = static_cast<float>(1.0 - lr * cfg.weight_decay);
    for (std::size_t i = 0; i < 3; ++i) CHECK(w.data()[i] == before[i] * factor);
}

TEST_CASE("adamw with constant gradient steps at the learning rate") {
    Tensor<double> w = Tensor<double>::from_data({1}, {5.0});
    w.set_requires_grad(true);
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW<double> opt({{"w", w}}, cfg);
    double lr = 0.01;
    double g = 0.37;
    for (int step = 0; step < 20; ++step) {
        w.zero_grad();
        sum(scale(w, g)).backward(); // constant gradient g
        double before = w.data()[0];
        opt.step(lr);
        double delta = before - w.data()[0];
        CHECK(delta == doctest::Approx(lr).epsilon(1e-3));
    }
}

TEST_CASE("adamw is deterministic") {
    auto run = [] {
        Tensor<float> w = Tensor<float>::from_data({4}, {1, 2, 3, 4});
        w.set_requires_grad(true);
        TrainConfig cfg;
        AdamW<float> opt({{"w", w}}, cfg);
        for (int i = 0; i < 10; ++i) {
            w.zero_grad();
            sum(mul(w, w)).backward();
            opt.step(1e-2);
        }
        return w.data();
    };
    CHECK(run() == run());
}

TEST_CASE("training rejects empty or mislabeled splits") {
    HcctModel<float> model = HcctModel<float>::init(tiny_config(), 1);
    CHECK_THROWS_AS(train_model(model, std::vector<Volume>{}, {}, tiny_train(1)), ContractError);

    auto vols = synth_dataset(2, 8, 3, 5);
    vols[0].label = 7;
    CHECK_THROWS_AS(train_model(model, vols, {}, tiny_train(1)), ContractError);
}

TEST_CASE("lr trace matches the schedule and report has one row per epoch") {
    HcctModel<float> model = HcctModel<float>::init(tiny_config(), 2);
    auto vols = synth_dataset(2, 8, 3, 5);
    TrainConfig cfg = tiny_train(6);
    cfg.decay_step = 2;
    TrainReport report = train_model(model, vols, {}, cfg);
    REQUIRE(report.epochs.size() == 6);
    for (std::size_t e = 0; e < 6; ++e) {
        CHECK(report.epochs[e].epoch == e);
        CHECK(report.epochs[e].lr == doctest::Approx(lr_at(e, cfg)));
        CHECK(std::isnan(report.epochs[e].val_acc));
    }
}

TEST_CASE("training with identical seeds is bit-identical") {
    auto run = [] {
        HcctModel<float> model = HcctModel<float>::init(tiny_config(), 2);
        auto vols = synth_dataset(2, 8, 3, 5);
        train_model(model, vols, {}, tiny_train(3));
        return snapshot_values(model);
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(a[i].second == b[i].second);
    }
}

TEST_CASE("resumed training reproduces the uninterrupted run bit-exactly") {
    auto vols = synth_dataset(2, 8, 3, 5);
    auto val = synth_dataset(1, 8, 3, 99);
    TrainConfig cfg = tiny_train(6);

    HcctModel<float> straight = HcctModel<float>::init(tiny_config(), 2);
    TrainState<float> straight_state;
    TrainReport full = train_model(straight, vols, val, cfg, straight_state);

    auto dir = testing::make_temp_dir("resume");
    HcctModel<float> part = HcctModel<float>::init(tiny_config(), 2);
    TrainState<float> part_state;
    TrainConfig half = cfg;
    half.epochs = 3;
    TrainReport first_half = train_model(part, vols, val, half, part_state);
    save_train_state(dir / "state.hcts", part, part_state);

    auto [resumed, resumed_state] = load_train_state<float>(dir / "state.hcts");
    CHECK(resumed_state.next_epoch == 3);
    TrainReport second_half = train_model(resumed, vols, val, cfg, resumed_state);

    auto sa = snapshot_values(straight);
    auto sb = snapshot_values(resumed);
    REQUIRE(sa.size() == sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) CHECK(sa[i].second == sb[i].second);

    REQUIRE(first_half.epochs.size() + second_half.epochs.size() == full.epochs.size());
    for (std::size_t e = 0; e < full.epochs.size(); ++e) {
        const EpochStats& got =
            e < 3 ? first_half.epochs[e] : second_half.epochs[e - 3];
        CHECK(got.train_loss == full.epochs[e].train_loss);
        CHECK(got.train_acc == full.epochs[e].train_acc);
        if (!std::isnan(full.epochs[e].val_acc)) CHECK(got.val_acc == full.epochs[e].val_acc);
    }
    CHECK(resumed_state.best_val_acc == straight_state.best_val_acc);
}

TEST_CASE("fine-tuning freezes the conv encoder and transformer bit-exactly") {
    auto vols = synth_dataset(2, 8, 3, 5);
    HcctModel<float> model = HcctModel<float>::init(tiny_config(), 3);
    train_model(model, vols, {}, tiny_train(2));

    std::uint64_t conv_before = group_hash(model, "conv");
    std::uint64_t encoder_before = group_hash(model, "encoder");
    std::uint64_t patch_before = group_hash(model, "patch_embed");
    std::uint64_t head_before = group_hash(model, "head");

    TrainConfig ft = tiny_train(3);
    TrainReport report = finetune_model(model, vols, {}, ft);
    CHECK(report.epochs.size() == 3);

    CHECK(group_hash(model, "conv") == conv_before);
    CHECK(group_hash(model, "encoder") == encoder_before);
    CHECK(group_hash(model, "patch_embed") != patch_before);
    CHECK(group_hash(model, "head") != head_before);

    // reduced learning rate: base * 0.1
    CHECK(report.epochs[0].lr == doctest::Approx(ft.lr * 0.1));
}

TEST_CASE("12-sample overfit run reaches full train accuracy") {
    auto vols = synth_dataset(4, 24, 3, 7);
    HcctModel<float> model = HcctModel<float>::init(ModelConfig::desk(), 1);
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.decay_step = 20;
    cfg.seed = 7;
    cfg.stop_at_train_acc = 1.0;
    TrainReport report = train_model(model, vols, {}, cfg);
    REQUIRE(!report.epochs.empty());
    CHECK(report.epochs.back().train_acc == 1.0);
    CHECK(report.epochs.size() <= 200);
    // loss decayed by an order of magnitude from the ln(3) start
    CHECK(report.epochs.back().train_loss < 0.11);
}

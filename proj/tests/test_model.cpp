#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "hcct/checkpoint.hpp"
#include "hcct/model.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace hcct;

namespace {

// Small enough to exercise every path quickly.
ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.input_extent = 8;
    cfg.conv_channels = {4, 8};
    cfg.conv_kernel = 3;
    cfg.pool_window = 2;
    cfg.embed_dim = 8;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.ffn_ratio = 2;
    cfg.dropout_p = 0.2;
    cfg.num_classes = 3;
    return cfg;
}

} // namespace

TEST_CASE("full-size configuration shape claims") {
    ShapeInfo info = ModelConfig::paper().shape_info();
    CHECK(info.num_tokens == 512);
    CHECK(info.spatial_extent == 6);
    CHECK(info.flatten_dim == 216);
    CHECK(info.sequence_length == 513);
}

TEST_CASE("desk configuration shape claims") {
    ShapeInfo info = ModelConfig::desk().shape_info();
    CHECK(info.num_tokens == 64);
    CHECK(info.spatial_extent == 3);
    CHECK(info.flatten_dim == 27);
    CHECK(info.sequence_length == 65);
}

TEST_CASE("config validation rejects bad combinations") {
    ModelConfig cfg = tiny_config();
    cfg.input_extent = 9; // not divisible by 2^2
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = tiny_config();
    cfg.embed_dim = 9;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = tiny_config();
    cfg.num_classes = 1;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = tiny_config();
    cfg.conv_kernel = 4;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
}

TEST_CASE("conv_encode desk config produces [b, 64, 3, 3, 3]") {
    ModelConfig cfg = ModelConfig::desk();
    HcctModel<float> model = HcctModel<float>::init(cfg, 1);
    Tensor<float> x = Tensor<float>::zeros({1, 1, 24, 24, 24});
    ForwardOptions opts; // eval
    Tensor<float> feats = conv_encode(model, x, opts);
    CHECK(feats.shape() == Shape{1, 64, 3, 3, 3});
}

TEST_CASE("conv_encode zero input with zero biases stays zero") {
    HcctModel<double> model = HcctModel<double>::init(tiny_config(), 3);
    Tensor<double> x = Tensor<double>::zeros({1, 1, 8, 8, 8});
    ForwardOptions opts;
    Tensor<double> feats = conv_encode(model, x, opts);
    for (double v : feats.data()) CHECK(v == 0.0);
}

TEST_CASE("conv_encode rejects wrong extents") {
    HcctModel<double> model = HcctModel<double>::init(tiny_config(), 3);
    ForwardOptions opts;
    CHECK_THROWS_AS(conv_encode(model, Tensor<double>::zeros({1, 1, 9, 9, 9}), opts), ShapeError);
}

TEST_CASE("tokenize maps zero features to zero patch tokens and the learned cls") {
    ModelConfig cfg = tiny_config();
    cfg.positional_embedding = false;
    HcctModel<double> model = HcctModel<double>::init(cfg, 5);
    ShapeInfo info = cfg.shape_info();
    Tensor<double> feats = Tensor<double>::zeros(
        {2, info.num_tokens, info.spatial_extent, info.spatial_extent, info.spatial_extent});
    Tensor<double> tokens = tokenize(model, feats);
    CHECK(tokens.shape() == Shape{2, info.sequence_length, cfg.embed_dim});
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t k = 0; k < cfg.embed_dim; ++k) {
            CHECK(tokens.data()[b * info.sequence_length * cfg.embed_dim + k] ==
                  doctest::Approx(model.cls_token.data()[k]));
        }
        for (std::size_t tk = 1; tk < info.sequence_length; ++tk) {
            for (std::size_t k = 0; k < cfg.embed_dim; ++k) {
                CHECK(tokens.data()[(b * info.sequence_length + tk) * cfg.embed_dim + k] == 0.0);
            }
        }
    }
}

TEST_CASE("encoder block attention rows sum to one") {
    Rng rng(13);
    HcctModel<double> model = HcctModel<double>::init(tiny_config(), 7);
    Tensor<double> x = testing::random_tensor({2, 5, 8}, rng);
    ForwardOptions opts;
    opts.capture = true;
    auto out = encoder_block(model.encoder[0], x, 2, 0.0, opts);
    CHECK(out.attention.shape() == Shape{2, 2, 5, 5});
    const auto& a = out.attention.data();
    for (std::size_t row = 0; row < 2 * 2 * 5; ++row) {
        double s = 0.0;
        for (std::size_t c = 0; c < 5; ++c) s += a[row * 5 + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("encoder block with zero weights is the identity") {
    ModelConfig cfg = tiny_config();
    HcctModel<double> model = HcctModel<double>::init(cfg, 7);
    EncoderBlockParams<double>& b = model.encoder[0];
    for (Tensor<double>* w : {&b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ffn_w1,
                              &b.ffn_b1, &b.ffn_w2, &b.ffn_b2}) {
        std::fill(w->raw_data().begin(), w->raw_data().end(), 0.0);
    }
    Rng rng(14);
    Tensor<double> x = testing::random_tensor({2, 4, 8}, rng);
    ForwardOptions opts;
    auto out = encoder_block(b, x, 2, 0.0, opts);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(out.tokens.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("encoder block single token attends to itself") {
    Rng rng(15);
    HcctModel<double> model = HcctModel<double>::init(tiny_config(), 9);
    Tensor<double> x = testing::random_tensor({1, 1, 8}, rng);
    ForwardOptions opts;
    opts.capture = true;
    auto out = encoder_block(model.encoder[0], x, 2, 0.0, opts);
    CHECK(out.attention.shape() == Shape{1, 2, 1, 1});
    CHECK(out.attention.data()[0] == doctest::Approx(1.0));
    CHECK(out.attention.data()[1] == doctest::Approx(1.0));
}

TEST_CASE("hybrid pool with zero scorer averages the patch tokens") {
    Rng rng(16);
    Tensor<double> tokens = testing::random_tensor({2, 5, 3}, rng);
    Tensor<double> w = Tensor<double>::zeros({3, 1});
    Tensor<double> b = Tensor<double>::zeros({1});
    Tensor<double> z = hybrid_pool(tokens, w, b);
    CHECK(z.shape() == Shape{2, 6});
    for (std::size_t bi = 0; bi < 2; ++bi) {
        for (std::size_t k = 0; k < 3; ++k) {
            CHECK(z.data()[bi * 6 + k] == doctest::Approx(tokens.data()[bi * 15 + k]));
            double mean = 0.0;
            for (std::size_t j = 1; j < 5; ++j) mean += tokens.data()[(bi * 5 + j) * 3 + k];
            mean /= 4.0;
            CHECK(z.data()[bi * 6 + 3 + k] == doctest::Approx(mean).epsilon(1e-9));
        }
    }
}

TEST_CASE("hybrid pool with one patch token returns that token") {
    Rng rng(17);
    Tensor<double> tokens = testing::random_tensor({1, 2, 4}, rng);
    Tensor<double> w = testing::random_tensor({4, 1}, rng);
    Tensor<double> b = testing::random_tensor({1}, rng);
    Tensor<double> z = hybrid_pool(tokens, w, b);
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(z.data()[4 + k] == doctest::Approx(tokens.data()[4 + k]));
    }
}

TEST_CASE("hybrid pool rejects a cls-only sequence") {
    Tensor<double> tokens = Tensor<double>::zeros({1, 1, 4});
    Tensor<double> w = Tensor<double>::zeros({4, 1});
    Tensor<double> b = Tensor<double>::zeros({1});
    CHECK_THROWS_AS(hybrid_pool(tokens, w, b), ContractError);
}

TEST_CASE("hybrid pool matches the straight-line oracle") {
    Rng rng(18);
    Tensor<double> tokens = testing::random_tensor({2, 5, 3}, rng, -2.0, 2.0);
    Tensor<double> w = testing::random_tensor({3, 1}, rng);
    Tensor<double> b = testing::random_tensor({1}, rng);
    Tensor<double> z = hybrid_pool(tokens, w, b);
    std::vector<double> expect =
        oracles::hybrid_pool(tokens.data(), 2, 5, 3, w.data(), b.data()[0]);
    for (std::size_t i = 0; i < expect.size(); ++i) {
        CHECK(z.data()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
    }
}

TEST_CASE("hybrid pool is invariant to patch token order") {
    Rng rng(19);
    std::size_t b = 2, t = 6, d = 4, n = t - 1;
    Tensor<double> tokens = testing::random_tensor({b, t, d}, rng);
    Tensor<double> w = testing::random_tensor({d, 1}, rng);
    Tensor<double> bias = testing::random_tensor({1}, rng);
    Tensor<double> z1 = hybrid_pool(tokens, w, bias);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng prng(99);
    prng.shuffle(perm);
    std::vector<double> permuted(tokens.data());
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t k = 0; k < d; ++k) {
                permuted[(bi * t + 1 + j) * d + k] = tokens.data()[(bi * t + 1 + perm[j]) * d + k];
            }
        }
    }
    Tensor<double> z2 = hybrid_pool(Tensor<double>::from_data({b, t, d}, permuted), w, bias);
    for (std::size_t i = 0; i < z1.size(); ++i) {
        CHECK(z2.data()[i] == doctest::Approx(z1.data()[i]).epsilon(1e-9));
    }
}

TEST_CASE("forward produces [b, C] logits and captures on request") {
    ModelConfig cfg = tiny_config();
    HcctModel<double> model = HcctModel<double>::init(cfg, 21);
    Rng rng(22);
    Tensor<double> x = testing::random_tensor({2, 1, 8, 8, 8}, rng, 0.0, 1.0);
    ForwardOptions opts;
    opts.capture = true;
    ForwardResult<double> out = model_forward(model, x, opts);
    CHECK(out.logits.shape() == Shape{2, 3});
    CHECK(out.attention.size() == cfg.num_layers);
    CHECK(out.attention[0].shape() == Shape{2, 2, 9, 9});
    CHECK(out.conv_features.shape() == Shape{2, 8, 2, 2, 2});

    ForwardOptions plain;
    ForwardResult<double> quiet = model_forward(model, x, plain);
    CHECK(quiet.attention.empty());
    CHECK_FALSE(quiet.conv_features.defined());
}

TEST_CASE("evaluation forward is bit-identical across passes") {
    HcctModel<double> model = HcctModel<double>::init(tiny_config(), 23);
    Rng rng(24);
    Tensor<double> x = testing::random_tensor({2, 1, 8, 8, 8}, rng, 0.0, 1.0);
    ForwardOptions opts; // dropout configured at 0.2 but inactive in eval
    Tensor<double> l1 = model_forward(model, x, opts).logits;
    Tensor<double> l2 = model_forward(model, x, opts).logits;
    CHECK(l1.data() == l2.data());
}

TEST_CASE("per-layer parameter count matches the published scaling delta") {
    std::size_t per_layer = transformer_layer_parameters(240, 2);
    CHECK(per_layer == 463440);
    double delta = 0.47e6;
    CHECK(std::abs(static_cast<double>(per_layer) - delta) / delta < 0.02);

    ModelConfig p3 = ModelConfig::paper(3);
    ModelConfig p4 = ModelConfig::paper(4);
    CHECK(count_parameters(p4) - count_parameters(p3) == per_layer);
}

TEST_CASE("transformer contribution is zero at L = 0 and linear in L") {
    ModelConfig cfg = tiny_config();
    cfg.num_layers = 0;
    CHECK(parameter_breakdown(cfg).transformer == 0);
    cfg.num_layers = 3;
    ParamCounts c3 = parameter_breakdown(cfg);
    cfg.num_layers = 6;
    ParamCounts c6 = parameter_breakdown(cfg);
    CHECK(c6.total - c3.total == 3 * c3.per_layer);
}

TEST_CASE("runtime parameter tally equals the closed form") {
    Rng rng(25);
    for (int trial = 0; trial < 5; ++trial) {
        ModelConfig cfg;
        cfg.pool_window = 2;
        std::size_t blocks = 1 + rng.next_below(2);
        cfg.input_extent = 4 << blocks;
        cfg.conv_channels.clear();
        for (std::size_t i = 0; i < blocks; ++i) cfg.conv_channels.push_back(2 + rng.next_below(6));
        cfg.conv_kernel = 3;
        cfg.num_heads = 1 + rng.next_below(3);
        cfg.embed_dim = cfg.num_heads * (1 + rng.next_below(5));
        cfg.num_layers = rng.next_below(3);
        cfg.ffn_ratio = 1 + rng.next_below(3);
        cfg.num_classes = 2 + rng.next_below(3);
        cfg.positional_embedding = rng.next_below(2) == 0;
        HcctModel<float> model = HcctModel<float>::init(cfg, 1);
        CHECK(count_parameters(model) == count_parameters(cfg));
    }
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    auto dir = testing::make_temp_dir("ckpt");
    HcctModel<float> model = HcctModel<float>::init(tiny_config(), 31);
    model.conv_blocks[0].bn_state.running_mean[0] = 0.125f; // non-default buffer
    save_checkpoint(model, dir / "a.hcct");
    HcctModel<float> loaded = load_checkpoint<float>(dir / "a.hcct");
    save_checkpoint(loaded, dir / "b.hcct");
    CHECK(testing::read_file_bytes(dir / "a.hcct") == testing::read_file_bytes(dir / "b.hcct"));
    CHECK(loaded.config == model.config);
    auto pa = model.named_parameters();
    auto pb = loaded.named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        CHECK(pa[i].second.data() == pb[i].second.data());
    }
    CHECK(loaded.conv_blocks[0].bn_state.running_mean[0] == 0.125f);
}

TEST_CASE("checkpoint loader rejects malformed files") {
    auto dir = testing::make_temp_dir("ckpt_bad");
    {
        std::ofstream os(dir / "bad_magic.hcct", std::ios::binary);
        os << "NOPE then some bytes";
    }
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "bad_magic.hcct"), ParseError);

    HcctModel<float> model = HcctModel<float>::init(tiny_config(), 33);
    save_checkpoint(model, dir / "ok.hcct");
    std::string bytes = testing::read_file_bytes(dir / "ok.hcct");
    {
        std::ofstream os(dir / "short.hcct", std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "short.hcct"), ParseError);
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "missing.hcct"), IoError);
}

TEST_CASE("full model gradient matches finite differences at 64-bit") {
    ModelConfig cfg = tiny_config();
    cfg.dropout_p = 0.0; // keep the loss a smooth function of the parameters
    cfg.num_layers = 1;
    HcctModel<double> model = HcctModel<double>::init(cfg, 41);
    Rng rng(42);
    Tensor<double> x = testing::random_tensor({2, 1, 8, 8, 8}, rng, 0.0, 1.0);
    std::vector<std::size_t> labels{0, 2};

    auto params = model.named_parameters();
    auto forward_loss = [&]() {
        // fresh running stats each evaluation so batchnorm stays pure
        for (auto& block : model.conv_blocks) {
            block.bn_state = BatchNormState<double>::init(block.bn_state.running_mean.size());
        }
        ForwardOptions opts;
        opts.training = true;
        ForwardResult<double> out = model_forward(model, x, opts);
        return cross_entropy(out.logits, labels);
    };

    for (auto& [name, p] : params) p.zero_grad();
    forward_loss().backward();

    double worst = 0.0;
    const double h = 1e-5;
    for (auto& [name, p] : params) {
        std::vector<double> analytic = p.grad();
        std::vector<double>& w = p.raw_data();
        std::vector<double> fd(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) {
            double keep = w[i];
            NoGradGuard guard;
            w[i] = keep + h;
            double up = forward_loss().item();
            w[i] = keep - h;
            double down = forward_loss().item();
            w[i] = keep;
            fd[i] = (up - down) / (2 * h);
        }
        worst = std::max(worst, testing::l2_rel_error(analytic, fd));
    }
    CHECK(worst < 1e-4);
}

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hcct/ops.hpp"
#include "hcct/ops3d.hpp"
#include "hcct/rng.hpp"

namespace hcct {

struct ShapeInfo {
    std::size_t spatial_extent;  // side length of each feature map after the encoder
    std::size_t num_tokens;      // one token per output channel
    std::size_t flatten_dim;     // spatial_extent^3
    std::size_t sequence_length; // num_tokens + 1 (class token)
};

// Architecture description. The convolutional tokenizer halves the extent
// once per block (stride-1 "same" convolutions, pooling by pool_window), and
// the final block's channel count is the token count.
struct ModelConfig {
    std::size_t input_extent = 24;
    std::vector<std::size_t> conv_channels = {16, 32, 64};
    std::size_t conv_kernel = 3;
    std::size_t pool_window = 2;
    std::size_t embed_dim = 32;
    std::size_t num_layers = 2;
    std::size_t num_heads = 4;
    std::size_t ffn_ratio = 2;
    double dropout_p = 0.2;
    std::size_t num_classes = 3;
    bool positional_embedding = true;

    bool operator==(const ModelConfig&) const = default;

    void validate() const {
        if (conv_channels.empty()) throw ValueError("config: conv_channels must be non-empty");
        if (conv_kernel % 2 == 0 || conv_kernel == 0) {
            throw ValueError("config: conv_kernel must be odd, got " + std::to_string(conv_kernel));
        }
        if (pool_window < 1) throw ValueError("config: pool_window must be >= 1");
        std::size_t extent = input_extent;
        for (std::size_t i = 0; i < conv_channels.size(); ++i) {
            if (extent == 0 || extent % pool_window != 0) {
                throw ValueError("config: input_extent " + std::to_string(input_extent) +
                                 " is not divisible by pool_window^" +
                                 std::to_string(conv_channels.size()));
            }
            extent /= pool_window;
        }
        if (extent < 1) throw ValueError("config: encoder output extent collapsed to zero");
        if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
            throw ValueError("config: embed_dim " + std::to_string(embed_dim) +
                             " must divide evenly into " + std::to_string(num_heads) + " heads");
        }
        if (ffn_ratio < 1) throw ValueError("config: ffn_ratio must be >= 1");
        if (num_classes < 2) throw ValueError("config: num_classes must be >= 2");
        if (dropout_p < 0.0 || dropout_p >= 1.0) {
            throw ValueError("config: dropout must be in [0, 1)");
        }
    }

    // Pure shape arithmetic; allocates nothing.
    ShapeInfo shape_info() const {
        validate();
        std::size_t extent = input_extent;
        for (std::size_t i = 0; i < conv_channels.size(); ++i) extent /= pool_window;
        ShapeInfo info;
        info.spatial_extent = extent;
        info.num_tokens = conv_channels.back();
        info.flatten_dim = extent * extent * extent;
        info.sequence_length = info.num_tokens + 1;
        return info;
    }

    static ModelConfig desk() { return ModelConfig{}; }

    // The full-size configuration: 192^3 input, five conv blocks ending in
    // 512 channels (512 tokens of 6x6x6), width 240, 8 heads.
    static ModelConfig paper(std::size_t layers = 3) {
        ModelConfig cfg;
        cfg.input_extent = 192;
        cfg.conv_channels = {32, 64, 128, 256, 512};
        cfg.conv_kernel = 3;
        cfg.pool_window = 2;
        cfg.embed_dim = 240;
        cfg.num_layers = layers;
        cfg.num_heads = 8;
        cfg.ffn_ratio = 2;
        cfg.dropout_p = 0.2;
        cfg.num_classes = 3;
        cfg.positional_embedding = true;
        return cfg;
    }
};

struct ParamCounts {
    std::size_t conv = 0;
    std::size_t embedding = 0;   // patch projection + class token + positional table
    std::size_t per_layer = 0;
    std::size_t transformer = 0; // num_layers * per_layer
    std::size_t pooling_head = 0;
    std::size_t total = 0;
};

// One encoder layer: QKV + output projections (4 d^2 weights), the FFN pair
// (2 r d^2), their biases (4d + rd + d), and two layernorms (4d).
inline std::size_t transformer_layer_parameters(std::size_t d, std::size_t r) {
    return 4 * d * d + 2 * r * d * d + (4 * d + r * d + d) + 4 * d;
}

inline ParamCounts parameter_breakdown(const ModelConfig& cfg) {
    cfg.validate();
    ShapeInfo info = cfg.shape_info();
    ParamCounts counts;
    std::size_t in_ch = 1;
    std::size_t k3 = cfg.conv_kernel * cfg.conv_kernel * cfg.conv_kernel;
    for (std::size_t out_ch : cfg.conv_channels) {
        counts.conv += out_ch * in_ch * k3 + out_ch /*bias*/ + 2 * out_ch /*bn gamma+beta*/;
        in_ch = out_ch;
    }
    std::size_t d = cfg.embed_dim;
    counts.embedding = info.flatten_dim * d + d /*projection*/ + d /*class token*/;
    if (cfg.positional_embedding) counts.embedding += info.sequence_length * d;
    counts.per_layer = transformer_layer_parameters(d, cfg.ffn_ratio);
    counts.transformer = cfg.num_layers * counts.per_layer;
    counts.pooling_head = (d + 1) + (2 * d * cfg.num_classes + cfg.num_classes);
    counts.total = counts.conv + counts.embedding + counts.transformer + counts.pooling_head;
    return counts;
}

inline std::size_t count_parameters(const ModelConfig& cfg) {
    return parameter_breakdown(cfg).total;
}

template <typename T>
struct ConvBlockParams {
    Tensor<T> weight; // [c_out, c_in, k, k, k]
    Tensor<T> bias;
    Tensor<T> bn_gamma;
    Tensor<T> bn_beta;
    BatchNormState<T> bn_state;
};

template <typename T>
struct EncoderBlockParams {
    Tensor<T> ln1_gamma, ln1_beta;
    Tensor<T> wq, bq, wk, bk, wv, bv;
    Tensor<T> wo, bo;
    Tensor<T> ln2_gamma, ln2_beta;
    Tensor<T> ffn_w1, ffn_b1; // d -> r*d
    Tensor<T> ffn_w2, ffn_b2; // r*d -> d
};

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
struct HcctModel {
    ModelConfig config;
    std::vector<ConvBlockParams<T>> conv_blocks;
    Tensor<T> patch_weight; // [s^3, d]
    Tensor<T> patch_bias;   // [d]
    Tensor<T> cls_token;    // [1, 1, d]
    Tensor<T> pos_embed;    // [1, n+1, d]; undefined when disabled
    std::vector<EncoderBlockParams<T>> encoder;
    Tensor<T> pool_weight; // [d, 1] token scoring
    Tensor<T> pool_bias;   // [1]
    Tensor<T> head_weight; // [2d, C]
    Tensor<T> head_bias;   // [C]

    static HcctModel init(const ModelConfig& cfg, std::uint64_t seed);

    NamedParams<T> named_parameters();
    // Tensors updated during fine-tuning: the patch embedding (including the
    // class token and positional table), the token scorer, and the classifier.
    NamedParams<T> trainable_parameters(bool finetune);
    // Batchnorm running statistics, serialized alongside the parameters.
    std::vector<std::pair<std::string, std::vector<T>*>> named_buffers();
};

namespace detail {

template <typename T>
Tensor<T> init_trunc_normal(Shape shape, double sigma, Rng rng) {
    std::vector<T> data(numel(shape));
    for (T& v : data) v = static_cast<T>(rng.next_trunc_normal(sigma));
    return Tensor<T>::from_data(std::move(shape), std::move(data)).set_requires_grad(true);
}

template <typename T>
Tensor<T> init_kaiming(Shape shape, std::size_t fan_in, Rng rng) {
    double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<T> data(numel(shape));
    for (T& v : data) v = static_cast<T>(rng.next_normal() * sigma);
    return Tensor<T>::from_data(std::move(shape), std::move(data)).set_requires_grad(true);
}

template <typename T>
Tensor<T> init_const(Shape shape, T value) {
    return Tensor<T>::full(std::move(shape), value).set_requires_grad(true);
}

} // namespace detail

template <typename T>
HcctModel<T> HcctModel<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ShapeInfo info = cfg.shape_info();
    Rng root(seed);
    HcctModel<T> m;
    m.config = cfg;

    std::size_t in_ch = 1;
    std::size_t k = cfg.conv_kernel;
    for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
        std::size_t out_ch = cfg.conv_channels[i];
        ConvBlockParams<T> block;
        block.weight = detail::init_kaiming<T>({out_ch, in_ch, k, k, k}, in_ch * k * k * k,
                                               root.derive("conv.weight", i));
        block.bias = detail::init_const<T>({out_ch}, T(0));
        block.bn_gamma = detail::init_const<T>({out_ch}, T(1));
        block.bn_beta = detail::init_const<T>({out_ch}, T(0));
        block.bn_state = BatchNormState<T>::init(out_ch);
        m.conv_blocks.push_back(std::move(block));
        in_ch = out_ch;
    }

    std::size_t d = cfg.embed_dim;
    m.patch_weight = detail::init_trunc_normal<T>({info.flatten_dim, d}, 0.02, root.derive("patch.weight"));
    m.patch_bias = detail::init_const<T>({d}, T(0));
    m.cls_token = detail::init_trunc_normal<T>({1, 1, d}, 0.02, root.derive("cls"));
    if (cfg.positional_embedding) {
        m.pos_embed = detail::init_trunc_normal<T>({1, info.sequence_length, d}, 0.02, root.derive("pos"));
    }

    std::size_t rd = cfg.ffn_ratio * d;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        EncoderBlockParams<T> b;
        b.ln1_gamma = detail::init_const<T>({d}, T(1));
        b.ln1_beta = detail::init_const<T>({d}, T(0));
        b.wq = detail::init_trunc_normal<T>({d, d}, 0.02, root.derive("wq", l));
        b.bq = detail::init_const<T>({d}, T(0));
        b.wk = detail::init_trunc_normal<T>({d, d}, 0.02, root.derive("wk", l));
        b.bk = detail::init_const<T>({d}, T(0));
        b.wv = detail::init_trunc_normal<T>({d, d}, 0.02, root.derive("wv", l));
        b.bv = detail::init_const<T>({d}, T(0));
        b.wo = detail::init_trunc_normal<T>({d, d}, 0.02, root.derive("wo", l));
        b.bo = detail::init_const<T>({d}, T(0));
        b.ln2_gamma = detail::init_const<T>({d}, T(1));
        b.ln2_beta = detail::init_const<T>({d}, T(0));
        b.ffn_w1 = detail::init_trunc_normal<T>({d, rd}, 0.02, root.derive("ffn.w1", l));
        b.ffn_b1 = detail::init_const<T>({rd}, T(0));
        b.ffn_w2 = detail::init_trunc_normal<T>({rd, d}, 0.02, root.derive("ffn.w2", l));
        b.ffn_b2 = detail::init_const<T>({d}, T(0));
        m.encoder.push_back(std::move(b));
    }

    m.pool_weight = detail::init_trunc_normal<T>({d, 1}, 0.02, root.derive("seqpool.weight"));
    m.pool_bias = detail::init_const<T>({1}, T(0));
    m.head_weight = detail::init_trunc_normal<T>({2 * d, cfg.num_classes}, 0.02, root.derive("head.weight"));
    m.head_bias = detail::init_const<T>({cfg.num_classes}, T(0));
    return m;
}

template <typename T>
NamedParams<T> HcctModel<T>::named_parameters() {
    NamedParams<T> out;
    for (std::size_t i = 0; i < conv_blocks.size(); ++i) {
        std::string p = "conv" + std::to_string(i) + ".";
        out.emplace_back(p + "weight", conv_blocks[i].weight);
        out.emplace_back(p + "bias", conv_blocks[i].bias);
        out.emplace_back(p + "bn.gamma", conv_blocks[i].bn_gamma);
        out.emplace_back(p + "bn.beta", conv_blocks[i].bn_beta);
    }
    out.emplace_back("patch_embed.weight", patch_weight);
    out.emplace_back("patch_embed.bias", patch_bias);
    out.emplace_back("cls_token", cls_token);
    if (pos_embed.defined()) out.emplace_back("pos_embed", pos_embed);
    for (std::size_t l = 0; l < encoder.size(); ++l) {
        std::string p = "encoder" + std::to_string(l) + ".";
        EncoderBlockParams<T>& b = encoder[l];
        out.emplace_back(p + "ln1.gamma", b.ln1_gamma);
        out.emplace_back(p + "ln1.beta", b.ln1_beta);
        out.emplace_back(p + "attn.wq", b.wq);
        out.emplace_back(p + "attn.bq", b.bq);
        out.emplace_back(p + "attn.wk", b.wk);
        out.emplace_back(p + "attn.bk", b.bk);
        out.emplace_back(p + "attn.wv", b.wv);
        out.emplace_back(p + "attn.bv", b.bv);
        out.emplace_back(p + "attn.wo", b.wo);
        out.emplace_back(p + "attn.bo", b.bo);
        out.emplace_back(p + "ln2.gamma", b.ln2_gamma);
        out.emplace_back(p + "ln2.beta", b.ln2_beta);
        out.emplace_back(p + "ffn.w1", b.ffn_w1);
        out.emplace_back(p + "ffn.b1", b.ffn_b1);
        out.emplace_back(p + "ffn.w2", b.ffn_w2);
        out.emplace_back(p + "ffn.b2", b.ffn_b2);
    }
    out.emplace_back("seqpool.weight", pool_weight);
    out.emplace_back("seqpool.bias", pool_bias);
    out.emplace_back("head.weight", head_weight);
    out.emplace_back("head.bias", head_bias);
    return out;
}

template <typename T>
NamedParams<T> HcctModel<T>::trainable_parameters(bool finetune) {
    if (!finetune) return named_parameters();
    NamedParams<T> out;
    out.emplace_back("patch_embed.weight", patch_weight);
    out.emplace_back("patch_embed.bias", patch_bias);
    out.emplace_back("cls_token", cls_token);
    if (pos_embed.defined()) out.emplace_back("pos_embed", pos_embed);
    out.emplace_back("seqpool.weight", pool_weight);
    out.emplace_back("seqpool.bias", pool_bias);
    out.emplace_back("head.weight", head_weight);
    out.emplace_back("head.bias", head_bias);
    return out;
}

template <typename T>
std::vector<std::pair<std::string, std::vector<T>*>> HcctModel<T>::named_buffers() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    for (std::size_t i = 0; i < conv_blocks.size(); ++i) {
        std::string p = "conv" + std::to_string(i) + ".bn.";
        out.emplace_back(p + "running_mean", &conv_blocks[i].bn_state.running_mean);
        out.emplace_back(p + "running_var", &conv_blocks[i].bn_state.running_var);
    }
    return out;
}

// Runtime tally over the actual parameter tensors.
template <typename T>
std::size_t count_parameters(HcctModel<T>& model) {
    std::size_t total = 0;
    for (auto& [name, tensor] : model.named_parameters()) total += tensor.size();
    return total;
}

struct ForwardOptions {
    bool training = false;        // dropout active, batchnorm uses batch statistics
    bool capture = false;         // keep attention probabilities and conv features
    bool freeze_features = false; // conv encoder runs in eval mode with no graph
    Rng* rng = nullptr;           // dropout stream; required when training with dropout_p > 0
};

template <typename T>
struct ForwardResult {
    Tensor<T> logits;                 // [b, C]
    std::vector<Tensor<T>> attention; // per layer, [b, h, n+1, n+1]
    Tensor<T> conv_features;          // [b, n, s, s, s]
};

// Convolutional tokenizer: conv -> batchnorm -> relu -> maxpool per block.
template <typename T>
Tensor<T> conv_encode(HcctModel<T>& model, const Tensor<T>& volumes, const ForwardOptions& opts) {
    const Shape& s = volumes.shape();
    if (s.size() != 5 || s[1] != 1) {
        throw ShapeError("conv_encode: input must be [b, 1, E, E, E], got " + shape_str(s));
    }
    if (s[2] != model.config.input_extent || s[3] != model.config.input_extent ||
        s[4] != model.config.input_extent) {
        throw ShapeError("conv_encode: volume extent " + shape_str({s[2], s[3], s[4]}) +
                         " does not match configured input_extent " +
                         std::to_string(model.config.input_extent));
    }
    bool bn_training = opts.training && !opts.freeze_features;
    std::size_t pad = (model.config.conv_kernel - 1) / 2;
    Tensor<T> x = volumes;
    for (auto& block : model.conv_blocks) {
        x = conv3d(x, block.weight, block.bias, 1, pad);
        x = batchnorm3d(x, block.bn_gamma, block.bn_beta, block.bn_state, bn_training);
        x = relu(x);
        x = maxpool3d(x, model.config.pool_window);
    }
    return x;
}

// Channels-as-tokens: each output channel map is flattened and projected to
// the embedding width, the class token is prepended, and the positional
// table (covering the class slot) is added.
template <typename T>
Tensor<T> tokenize(HcctModel<T>& model, const Tensor<T>& features) {
    const Shape& s = features.shape();
    if (s.size() != 5) throw ShapeError("tokenize: features must be [b, n, s, s, s], got " + shape_str(s));
    std::size_t b = s[0], n = s[1], flat = s[2] * s[3] * s[4];
    Tensor<T> patches = reshape(features, {b, n, flat});
    Tensor<T> tokens = linear(patches, model.patch_weight, model.patch_bias); // [b, n, d]
    std::size_t d = model.config.embed_dim;
    Tensor<T> cls = add(Tensor<T>::zeros({b, 1, d}), model.cls_token); // broadcast to the batch
    Tensor<T> seq = concat(cls, tokens, 1);
    if (model.pos_embed.defined()) seq = add(seq, model.pos_embed);
    return seq;
}

template <typename T>
struct EncoderBlockOutput {
    Tensor<T> tokens;
    Tensor<T> attention; // [b, h, t, t]
};

// Pre-norm residual block: x + MHA(LN(x)), then + FFN(LN(.)).
// Scaled dot-product attention over embed_dim/num_heads-wide heads.
template <typename T>
EncoderBlockOutput<T> encoder_block(EncoderBlockParams<T>& p, const Tensor<T>& x,
                                    std::size_t num_heads, double dropout_p,
                                    const ForwardOptions& opts) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw ShapeError("encoder_block: tokens must be [b, t, d], got " + shape_str(s));
    std::size_t d = s[2];
    if (d % num_heads != 0) {
        throw ShapeError("encoder_block: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(num_heads) + " heads");
    }
    std::size_t head_dim = d / num_heads;
    bool drop = opts.training && dropout_p > 0.0;
    if (drop && opts.rng == nullptr) {
        throw ContractError("encoder_block: dropout requires an rng in training mode");
    }
    static Rng unused_rng(0);
    Rng& rng = drop ? *opts.rng : unused_rng;

    Tensor<T> h1 = layernorm(x, p.ln1_gamma, p.ln1_beta);
    Tensor<T> q = linear(h1, p.wq, p.bq);
    Tensor<T> k = linear(h1, p.wk, p.bk);
    Tensor<T> v = linear(h1, p.wv, p.bv);

    T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
    Tensor<T> context;
    Tensor<T> att_record;
    for (std::size_t h = 0; h < num_heads; ++h) {
        Tensor<T> qh = slice(q, 2, h * head_dim, head_dim);
        Tensor<T> kh = slice(k, 2, h * head_dim, head_dim);
        Tensor<T> vh = slice(v, 2, h * head_dim, head_dim);
        Tensor<T> scores = scale(matmul(qh, transpose_last2(kh)), att_scale);
        Tensor<T> probs = softmax(scores, 2); // [b, t, t]
        if (opts.capture) {
            Tensor<T> rec = reshape(probs, {s[0], 1, s[1], s[1]});
            att_record = h == 0 ? rec : concat(att_record, rec, 1);
        }
        Tensor<T> attended = matmul(dropout(probs, dropout_p, rng, opts.training), vh);
        context = h == 0 ? attended : concat(context, attended, 2);
    }
    Tensor<T> x1 = add(x, linear(context, p.wo, p.bo));

    Tensor<T> h2 = layernorm(x1, p.ln2_gamma, p.ln2_beta);
    Tensor<T> f = linear(h2, p.ffn_w1, p.ffn_b1);
    f = dropout(relu(f), dropout_p, rng, opts.training);
    f = linear(f, p.ffn_w2, p.ffn_b2);
    return {add(x1, f), att_record};
}

// Splits the class token from the patch tokens, softmax-weights the patches
// through the learned scorer, and concatenates the class token with the
// weighted average: output is [b, 2d].
template <typename T>
Tensor<T> hybrid_pool(const Tensor<T>& tokens, const Tensor<T>& pool_weight,
                      const Tensor<T>& pool_bias) {
    const Shape& s = tokens.shape();
    if (s.size() != 3) throw ShapeError("hybrid_pool: tokens must be [b, t, d], got " + shape_str(s));
    if (s[1] < 2) {
        throw ContractError("hybrid_pool: sequence of length " + std::to_string(s[1]) +
                            " has no patch tokens");
    }
    std::size_t b = s[0], n = s[1] - 1, d = s[2];
    Tensor<T> cls = slice(tokens, 1, 0, 1);      // [b, 1, d]
    Tensor<T> patches = slice(tokens, 1, 1, n);  // [b, n, d]
    Tensor<T> scores = linear(patches, pool_weight, pool_bias); // [b, n, 1]
    Tensor<T> weights = softmax(transpose_last2(scores), 2);    // [b, 1, n]
    Tensor<T> pooled = matmul(weights, patches);                // [b, 1, d]
    return reshape(concat(cls, pooled, 2), {b, 2 * d});
}

template <typename T>
Tensor<T> hybrid_pool(HcctModel<T>& model, const Tensor<T>& tokens) {
    return hybrid_pool(tokens, model.pool_weight, model.pool_bias);
}

template <typename T>
ForwardResult<T> model_forward(HcctModel<T>& model, const Tensor<T>& volumes,
                               const ForwardOptions& opts) {
    ForwardResult<T> result;
    Tensor<T> features;
    if (opts.freeze_features) {
        NoGradGuard guard;
        features = conv_encode(model, volumes, opts);
    } else {
        features = conv_encode(model, volumes, opts);
    }
    if (opts.capture) result.conv_features = features;
    Tensor<T> tokens = tokenize(model, features);
    for (auto& block : model.encoder) {
        EncoderBlockOutput<T> out =
            encoder_block(block, tokens, model.config.num_heads, model.config.dropout_p, opts);
        tokens = out.tokens;
        if (opts.capture) result.attention.push_back(out.attention);
    }
    Tensor<T> z = hybrid_pool(model, tokens);
    result.logits = linear(z, model.head_weight, model.head_bias);
    return result;
}

} // namespace hcct

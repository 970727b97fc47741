#pragma once

#include <filesystem>
#include <vector>

#include "hcct/infer.hpp"

namespace hcct {

// Saliency volume aligned with the scan it explains: non-negative, zero
// wherever the scan is zero.
struct Heatmap {
    std::size_t extent = 0;
    std::vector<float> values;
    std::string source_id;
};

enum class ImportanceMode {
    MeanQueries, // average attention received over all query rows (default)
    ClsQuery     // attention received from the class-token query only
};

// Per-patch importance from captured attention: the mean probability each
// patch column receives across layers, heads, queries (and batch), with the
// class-token column excluded and the result renormalized to sum 1.
template <typename T>
std::vector<double> token_importance(const std::vector<Tensor<T>>& attention,
                                     ImportanceMode mode = ImportanceMode::MeanQueries) {
    if (attention.empty()) throw ContractError("token_importance: empty attention record");
    const Shape& s0 = attention.front().shape();
    if (s0.size() != 4 || s0[2] != s0[3]) {
        throw ShapeError("token_importance: expected [b, h, t, t] attention, got " + shape_str(s0));
    }
    std::size_t t = s0[2];
    if (t < 2) throw ContractError("token_importance: sequence has no patch tokens");
    std::size_t n = t - 1;
    std::vector<double> received(n, 0.0);
    double slices = 0.0;
    for (const Tensor<T>& layer : attention) {
        const Shape& s = layer.shape();
        if (s != s0) {
            throw ShapeError("token_importance: layer shapes differ: " + shape_str(s) + " vs " +
                             shape_str(s0));
        }
        std::size_t b = s[0], h = s[1];
        const T* data = layer.data().data();
        for (std::size_t bi = 0; bi < b; ++bi) {
            for (std::size_t hi = 0; hi < h; ++hi) {
                const T* mat = data + ((bi * h) + hi) * t * t;
                if (mode == ImportanceMode::ClsQuery) {
                    for (std::size_t j = 0; j < n; ++j) received[j] += static_cast<double>(mat[j + 1]);
                    slices += 1.0;
                } else {
                    for (std::size_t q = 0; q < t; ++q) {
                        const T* row = mat + q * t;
                        for (std::size_t j = 0; j < n; ++j) received[j] += static_cast<double>(row[j + 1]);
                    }
                    slices += static_cast<double>(t);
                }
            }
        }
    }
    double total = 0.0;
    for (double& r : received) {
        r /= slices;
        total += r;
    }
    if (total <= 0.0) throw NumericError("token_importance: attention mass is zero");
    for (double& r : received) r /= total;
    return received;
}

// Importance-weighted sum of the rectified channel maps: [n, s, s, s] -> [s^3].
template <typename T>
std::vector<double> fuse_importance(const std::vector<double>& importance,
                                    const Tensor<T>& conv_features) {
    const Shape& s = conv_features.shape();
    if (s.size() != 4) {
        throw ShapeError("fuse_importance: features must be [n, s, s, s], got " + shape_str(s));
    }
    if (s[0] != importance.size()) {
        throw ShapeError("fuse_importance: " + std::to_string(importance.size()) +
                         " importance weights for " + std::to_string(s[0]) + " channels");
    }
    std::size_t voxels = s[1] * s[2] * s[3];
    std::vector<double> fused(voxels, 0.0);
    const T* data = conv_features.data().data();
    for (std::size_t ch = 0; ch < s[0]; ++ch) {
        const T* map = data + ch * voxels;
        double w = importance[ch];
        for (std::size_t v = 0; v < voxels; ++v) {
            double a = static_cast<double>(map[v]);
            if (a > 0.0) fused[v] += w * a;
        }
    }
    for (double& v : fused) {
        if (v < 0.0) v = 0.0;
    }
    return fused;
}

// Full pipeline for one scan: capture-mode forward, token importance, fusion
// with the conv activations, trilinear upsample to the scan extent,
// normalization to [0, 1], and masking by the scan intensities.
template <typename T>
Heatmap render_heatmap(HcctModel<T>& model, const Volume& volume,
                       ImportanceMode mode = ImportanceMode::MeanQueries) {
    if (volume.extent != model.config.input_extent) {
        throw ShapeError("render_heatmap: volume extent " + std::to_string(volume.extent) +
                         " does not match model input_extent " +
                         std::to_string(model.config.input_extent));
    }
    NoGradGuard guard;
    ForwardOptions opts;
    opts.capture = true;
    std::vector<const Volume*> batch{&volume};
    ForwardResult<T> result = model_forward(model, stack_volumes<T>(batch), opts);

    std::vector<double> importance = token_importance(result.attention, mode);
    const Shape& fs = result.conv_features.shape(); // [1, n, s, s, s]
    Tensor<T> features = reshape(result.conv_features, {fs[1], fs[2], fs[3], fs[4]});
    std::vector<double> fused = fuse_importance(importance, features);

    std::size_t grid = fs[2];
    std::vector<T> fused_t(fused.size());
    for (std::size_t i = 0; i < fused.size(); ++i) fused_t[i] = static_cast<T>(fused[i]);
    Tensor<T> coarse = Tensor<T>::from_data({grid, grid, grid}, std::move(fused_t));
    Tensor<T> fine = trilinear_upsample(coarse, volume.extent, volume.extent, volume.extent);

    double mx = 0.0;
    for (const T& v : fine.data()) mx = std::max(mx, static_cast<double>(v));

    Heatmap heat;
    heat.extent = volume.extent;
    heat.source_id = volume.source_id;
    heat.values.resize(volume.voxels.size());
    const std::vector<T>& fv = fine.data();
    for (std::size_t i = 0; i < heat.values.size(); ++i) {
        double saliency = mx > 0.0 ? static_cast<double>(fv[i]) / mx : 0.0;
        if (saliency < 0.0) saliency = 0.0;
        heat.values[i] = static_cast<float>(saliency * static_cast<double>(volume.voxels[i]));
    }
    return heat;
}

// Writes center-slice PGMs of the scan and the heatmap along all three axes
// plus the raw heatmap as HVOL:
//   {source_id}_{sagittal|coronal|axial}_{scan|heat}.pgm, {source_id}_heatmap.hvol
void export_slices(const Heatmap& heat, const Volume& volume, const std::filesystem::path& out_dir);

} // namespace hcct

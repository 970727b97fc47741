#pragma once

#include <vector>

#include "hcct/data.hpp"
#include "hcct/model.hpp"

namespace hcct {

template <typename T>
Tensor<T> stack_volumes(const std::vector<const Volume*>& batch) {
    if (batch.empty()) throw ContractError("stack_volumes: empty batch");
    std::size_t e = batch[0]->extent;
    std::vector<T> data;
    data.reserve(batch.size() * e * e * e);
    for (const Volume* v : batch) {
        if (v->extent != e) {
            throw ShapeError("stack_volumes: extents differ: " + std::to_string(e) + " vs " +
                             std::to_string(v->extent));
        }
        for (float f : v->voxels) data.push_back(static_cast<T>(f));
    }
    return Tensor<T>::from_data({batch.size(), 1, e, e, e}, std::move(data));
}

// Batched evaluation-mode class predictions.
template <typename T>
std::vector<std::size_t> predict(HcctModel<T>& model, const std::vector<Volume>& volumes,
                                 std::size_t batch_size = 4) {
    if (batch_size < 1) throw ValueError("predict: batch_size must be >= 1");
    NoGradGuard guard;
    ForwardOptions opts;
    std::vector<std::size_t> out;
    out.reserve(volumes.size());
    for (std::size_t start = 0; start < volumes.size(); start += batch_size) {
        std::size_t n = std::min(batch_size, volumes.size() - start);
        std::vector<const Volume*> batch(n);
        for (std::size_t i = 0; i < n; ++i) batch[i] = &volumes[start + i];
        ForwardResult<T> result = model_forward(model, stack_volumes<T>(batch), opts);
        for (std::size_t p : argmax_rows(result.logits)) out.push_back(p);
    }
    return out;
}

template <typename T>
double accuracy(HcctModel<T>& model, const std::vector<Volume>& volumes,
                std::size_t batch_size = 4) {
    if (volumes.empty()) throw ContractError("accuracy: empty split");
    std::vector<std::size_t> preds = predict(model, volumes, batch_size);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        if (volumes[i].label >= 0 && static_cast<std::size_t>(volumes[i].label) == preds[i]) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(volumes.size());
}

} // namespace hcct

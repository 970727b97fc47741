#pragma once

#include <chrono>
#include <cmath>
#include <numeric>

#include "hcct/checkpoint.hpp"
#include "hcct/infer.hpp"
#include "hcct/report.hpp"

namespace hcct {

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 3;
    double lr = 4e-5;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t decay_step = 50; // epochs between learning-rate decays
    double decay_gamma = 0.1;
    std::uint64_t seed = 0;
    bool finetune = false;           // update only the embedding/pooling/classifier group
    double finetune_lr_factor = 0.1;

    // Optional early exit once train accuracy reaches the target (after at
    // least min_epochs). Negative disables.
    double stop_at_train_acc = -1.0;
    std::size_t min_epochs = 0;

    void validate() const {
        if (batch_size < 1) throw ValueError("train config: batch_size must be >= 1");
        if (decay_gamma <= 0.0 || decay_gamma > 1.0) {
            throw ValueError("train config: decay_gamma must be in (0, 1]");
        }
        if (decay_step < 1) throw ValueError("train config: decay_step must be >= 1");
        if (lr <= 0.0) throw ValueError("train config: lr must be positive");
        if (weight_decay < 0.0) throw ValueError("train config: weight_decay must be >= 0");
    }
};

// Step decay: lr = base * gamma^floor(epoch / decay_step).
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
    return cfg.lr * std::pow(cfg.decay_gamma, static_cast<double>(epoch / cfg.decay_step));
}

// Decoupled weight decay (applied directly to the weights, outside the
// moment estimates) with bias-corrected first/second moments.
template <typename T>
class AdamW {
public:
    AdamW(NamedParams<T> params, const TrainConfig& cfg)
        : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps), weight_decay_(cfg.weight_decay) {
        for (auto& [name, tensor] : params) {
            slots_.push_back(Slot{name, tensor, std::vector<T>(tensor.size(), T(0)),
                                  std::vector<T>(tensor.size(), T(0))});
        }
    }

    void step(double lr) {
        ++step_count_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
        for (Slot& s : slots_) {
            std::vector<T>& w = s.param.raw_data();
            const std::vector<T>& g = s.param.grad();
            T decay_factor = static_cast<T>(1.0 - lr * weight_decay_);
            for (std::size_t i = 0; i < w.size(); ++i) {
                if (weight_decay_ != 0.0) w[i] *= decay_factor;
                double gi = static_cast<double>(g[i]);
                s.m[i] = static_cast<T>(beta1_ * static_cast<double>(s.m[i]) + (1.0 - beta1_) * gi);
                s.v[i] = static_cast<T>(beta2_ * static_cast<double>(s.v[i]) + (1.0 - beta2_) * gi * gi);
                double mhat = static_cast<double>(s.m[i]) / bc1;
                double vhat = static_cast<double>(s.v[i]) / bc2;
                w[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    std::uint64_t step_count() const { return step_count_; }
    void set_step_count(std::uint64_t n) { step_count_ = n; }

    std::vector<std::pair<std::string, std::vector<T>>> export_moments_m() const {
        std::vector<std::pair<std::string, std::vector<T>>> out;
        for (const Slot& s : slots_) out.emplace_back(s.name, s.m);
        return out;
    }
    std::vector<std::pair<std::string, std::vector<T>>> export_moments_v() const {
        std::vector<std::pair<std::string, std::vector<T>>> out;
        for (const Slot& s : slots_) out.emplace_back(s.name, s.v);
        return out;
    }
    void import_moments(const std::vector<std::pair<std::string, std::vector<T>>>& m,
                        const std::vector<std::pair<std::string, std::vector<T>>>& v) {
        for (Slot& s : slots_) {
            bool found = false;
            for (const auto& [name, values] : m) {
                if (name == s.name) {
                    if (values.size() != s.m.size()) {
                        throw ParseError("optimizer state: moment size mismatch for " + s.name);
                    }
                    s.m = values;
                    found = true;
                }
            }
            for (const auto& [name, values] : v) {
                if (name == s.name) s.v = values;
            }
            if (!found) throw ParseError("optimizer state: missing moments for " + s.name);
        }
    }

private:
    struct Slot {
        std::string name;
        Tensor<T> param;
        std::vector<T> m, v;
    };
    std::vector<Slot> slots_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::uint64_t step_count_ = 0;
};

// Resumable bookkeeping between epochs.
template <typename T>
struct TrainState {
    std::uint64_t next_epoch = 0;
    std::uint64_t adam_step = 0;
    double best_val_acc = -1.0;
    std::uint64_t best_epoch = 0;
    bool has_best = false;
    std::vector<std::pair<std::string, std::vector<T>>> moments_m, moments_v;
    std::vector<std::pair<std::string, std::vector<T>>> best_values; // params + buffers
};

template <typename T>
std::vector<std::pair<std::string, std::vector<T>>> snapshot_values(HcctModel<T>& model) {
    std::vector<std::pair<std::string, std::vector<T>>> out;
    for (auto& [name, entry] : detail::state_entries(model)) out.emplace_back(name, *entry.second);
    return out;
}

template <typename T>
void restore_values(HcctModel<T>& model,
                    const std::vector<std::pair<std::string, std::vector<T>>>& values) {
    auto entries = detail::state_entries(model);
    if (entries.size() != values.size()) {
        throw ContractError("restore_values: entry count mismatch");
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].first != values[i].first ||
            entries[i].second.second->size() != values[i].second.size()) {
            throw ContractError("restore_values: mismatch at " + entries[i].first);
        }
        *entries[i].second.second = values[i].second;
    }
}

template <typename T>
HcctModel<T> clone_model(HcctModel<T>& src) {
    HcctModel<T> dst = HcctModel<T>::init(src.config, 0);
    restore_values(dst, snapshot_values(src));
    return dst;
}

// The best-validation model seen during a run, or the current model when no
// validation split was given.
template <typename T>
HcctModel<T> best_model(HcctModel<T>& model, const TrainState<T>& state) {
    if (!state.has_best) return clone_model(model);
    HcctModel<T> best = HcctModel<T>::init(model.config, 0);
    restore_values(best, state.best_values);
    return best;
}

namespace detail {

template <typename T>
void check_training_inputs(HcctModel<T>& model, const std::vector<Volume>& split,
                           const char* what) {
    if (split.empty()) throw ContractError(std::string(what) + " split is empty");
    for (const Volume& v : split) {
        if (v.extent != model.config.input_extent) {
            throw ShapeError(std::string(what) + " volume '" + v.source_id + "' has extent " +
                             std::to_string(v.extent) + ", model expects " +
                             std::to_string(model.config.input_extent));
        }
        if (v.label < 0 || static_cast<std::size_t>(v.label) >= model.config.num_classes) {
            throw ContractError(std::string(what) + " volume '" + v.source_id +
                                "' has label outside [0, " +
                                std::to_string(model.config.num_classes) + ")");
        }
    }
}

} // namespace detail

// Seeded-shuffle mini-batch training: forward, cross-entropy, backward,
// AdamW, per-epoch train/val evaluation in eval mode. All randomness is a
// pure function of (seed, epoch, batch), so a resumed run continues the
// exact stream of the uninterrupted one.
template <typename T>
TrainReport train_model(HcctModel<T>& model, const std::vector<Volume>& train_split,
                        const std::vector<Volume>& val_split, const TrainConfig& cfg,
                        TrainState<T>& state) {
    cfg.validate();
    detail::check_training_inputs(model, train_split, "train");
    if (!val_split.empty()) detail::check_training_inputs(model, val_split, "val");

    AdamW<T> opt(model.trainable_parameters(cfg.finetune), cfg);
    if (state.next_epoch > 0) {
        opt.import_moments(state.moments_m, state.moments_v);
        opt.set_step_count(state.adam_step);
    }

    Rng root(cfg.seed);
    TrainReport report;
    std::size_t n = train_split.size();
    std::vector<std::size_t> order(n);

    for (std::size_t epoch = state.next_epoch; epoch < cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        double lr = lr_at(epoch, cfg);

        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng = root.derive("shuffle", epoch);
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_index) {
            std::size_t nb = std::min(cfg.batch_size, n - start);
            std::vector<const Volume*> batch(nb);
            std::vector<std::size_t> labels(nb);
            for (std::size_t i = 0; i < nb; ++i) {
                batch[i] = &train_split[order[start + i]];
                labels[i] = static_cast<std::size_t>(batch[i]->label);
            }
            Rng dropout_rng = root.derive("dropout", epoch * 0x100000ULL + batch_index);
            ForwardOptions opts;
            opts.training = true;
            opts.freeze_features = cfg.finetune;
            opts.rng = &dropout_rng;
            ForwardResult<T> out = model_forward(model, stack_volumes<T>(batch), opts);
            Tensor<T> loss = cross_entropy(out.logits, labels);
            for (auto& [name, p] : model.trainable_parameters(cfg.finetune)) p.zero_grad();
            loss.backward();
            opt.step(lr);
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(nb);
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = lr;
        stats.train_loss = loss_sum / static_cast<double>(n);
        stats.train_acc = accuracy(model, train_split, cfg.batch_size);
        stats.val_acc = val_split.empty() ? std::numeric_limits<double>::quiet_NaN()
                                          : accuracy(model, val_split, cfg.batch_size);
        stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.epochs.push_back(stats);

        if (!val_split.empty() && stats.val_acc > state.best_val_acc) {
            state.best_val_acc = stats.val_acc;
            state.best_epoch = epoch;
            state.has_best = true;
            state.best_values = snapshot_values(model);
        }
        state.next_epoch = epoch + 1;

        if (cfg.stop_at_train_acc >= 0.0 && stats.train_acc >= cfg.stop_at_train_acc &&
            epoch + 1 >= cfg.min_epochs) {
            break;
        }
    }

    state.adam_step = opt.step_count();
    state.moments_m = opt.export_moments_m();
    state.moments_v = opt.export_moments_v();
    return report;
}

template <typename T>
TrainReport train_model(HcctModel<T>& model, const std::vector<Volume>& train_split,
                        const std::vector<Volume>& val_split, const TrainConfig& cfg) {
    TrainState<T> state;
    return train_model(model, train_split, val_split, cfg, state);
}

// Fine-tuning phase: only the patch embedding (with class token and
// positional table), token scorer, and classifier receive updates; the conv
// encoder runs in eval mode with no recorded graph. The learning rate is the
// configured base scaled by finetune_lr_factor.
template <typename T>
TrainReport finetune_model(HcctModel<T>& model, const std::vector<Volume>& train_split,
                           const std::vector<Volume>& val_split, TrainConfig cfg,
                           TrainState<T>& state) {
    cfg.finetune = true;
    cfg.lr *= cfg.finetune_lr_factor;
    return train_model(model, train_split, val_split, cfg, state);
}

template <typename T>
TrainReport finetune_model(HcctModel<T>& model, const std::vector<Volume>& train_split,
                           const std::vector<Volume>& val_split, TrainConfig cfg) {
    TrainState<T> state;
    return finetune_model(model, train_split, val_split, std::move(cfg), state);
}

// Training-state sidecar ("HCTS"): full current model (config + tensors),
// optimizer moments, counters, and the best-validation snapshot. Restoring
// it and finishing the run reproduces an uninterrupted run bit for bit.
template <typename T>
void save_train_state(const std::filesystem::path& path, HcctModel<T>& model,
                      const TrainState<T>& state) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_train_state: cannot open " + path.string());
    os.write("HCTS", 4);
    io::write_u32(os, 1);
    io::write_u64(os, state.next_epoch);
    io::write_u64(os, state.adam_step);
    io::write_f64(os, state.best_val_acc);
    io::write_u64(os, state.best_epoch);
    os.put(state.has_best ? 1 : 0);
    detail::write_model_config(os, model.config);
    auto write_list = [&os](const std::vector<std::pair<std::string, std::vector<T>>>& list) {
        io::write_u32(os, static_cast<std::uint32_t>(list.size()));
        for (const auto& [name, values] : list) {
            detail::write_tensor_entry(os, name, Shape{values.size()}, values);
        }
    };
    auto current = snapshot_values(model);
    write_list(current);
    write_list(state.moments_m);
    write_list(state.moments_v);
    write_list(state.has_best ? state.best_values
                              : std::vector<std::pair<std::string, std::vector<T>>>{});
    if (!os) throw IoError("save_train_state: write failed for " + path.string());
}

template <typename T>
std::pair<HcctModel<T>, TrainState<T>> load_train_state(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_train_state: cannot open " + path.string());
    char magic[4] = {};
    if (!is.read(magic, 4) || std::memcmp(magic, "HCTS", 4) != 0) {
        throw ParseError("load_train_state: bad magic in " + path.string() + " (expected HCTS)");
    }
    std::uint32_t version = io::read_u32(is, "train state header");
    if (version != 1) throw ParseError("load_train_state: unsupported version");
    TrainState<T> state;
    state.next_epoch = io::read_u64(is, "train state header");
    state.adam_step = io::read_u64(is, "train state header");
    state.best_val_acc = io::read_f64(is, "train state header");
    state.best_epoch = io::read_u64(is, "train state header");
    int flag = is.get();
    if (flag == std::istream::traits_type::eof()) throw ParseError("load_train_state: truncated");
    state.has_best = flag != 0;
    ModelConfig cfg = detail::read_model_config(is);
    HcctModel<T> model = HcctModel<T>::init(cfg, 0);
    auto read_list = [&is]() {
        std::vector<std::pair<std::string, std::vector<T>>> list;
        std::uint32_t count = io::read_u32(is, "train state list");
        for (std::uint32_t i = 0; i < count; ++i) {
            auto entry = detail::read_tensor_entry<T>(is);
            list.emplace_back(std::move(entry.name), std::move(entry.values));
        }
        return list;
    };
    restore_values(model, read_list());
    state.moments_m = read_list();
    state.moments_v = read_list();
    state.best_values = read_list();
    return {std::move(model), std::move(state)};
}

} // namespace hcct

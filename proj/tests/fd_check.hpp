#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "hcct/ops.hpp"
#include "hcct/rng.hpp"

namespace hcct::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> data(numel(shape));
    for (double& v : data) v = lo + (hi - lo) * rng.next_uniform();
    return Tensor<double>::from_data(std::move(shape), std::move(data));
}

inline double l2_rel_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        diff += d * d;
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    double denom = std::sqrt(na) + std::sqrt(nb);
    if (denom < 1e-12) return std::sqrt(diff);
    return std::sqrt(diff) / denom;
}

// Central-difference gradient check. `fn` maps the inputs to any tensor; the
// harness contracts it with a fixed random cotangent to get a scalar,
// compares backward() against (L(x+h) - L(x-h)) / 2h element by element, and
// returns the worst relative error over the inputs. `fn` must be a pure
// function of the input values (stochastic ops must reseed internally).
inline double max_gradient_error(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double h = 1e-5, std::uint64_t cotangent_seed = 17) {
    for (auto& t : inputs) t.set_requires_grad(true);

    Tensor<double> probe = fn(inputs);
    Rng crng(cotangent_seed);
    std::vector<double> cot(probe.size());
    for (double& c : cot) c = -1.0 + 2.0 * crng.next_uniform();
    Tensor<double> cot_tensor = Tensor<double>::from_data(probe.shape(), cot);

    auto loss_value = [&]() {
        NoGradGuard guard;
        Tensor<double> out = fn(inputs);
        const std::vector<double>& v = out.data();
        double acc = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) acc += v[i] * cot[i];
        return acc;
    };

    for (auto& t : inputs) t.zero_grad();
    Tensor<double> loss = sum(mul(fn(inputs), cot_tensor));
    loss.backward();

    double worst = 0.0;
    for (auto& t : inputs) {
        std::vector<double> analytic = t.grad();
        std::vector<double> fd(t.size());
        std::vector<double>& x = t.raw_data();
        for (std::size_t j = 0; j < x.size(); ++j) {
            double keep = x[j];
            x[j] = keep + h;
            double up = loss_value();
            x[j] = keep - h;
            double down = loss_value();
            x[j] = keep;
            fd[j] = (up - down) / (2.0 * h);
        }
        worst = std::max(worst, l2_rel_error(analytic, fd));
    }
    return worst;
}

inline std::uint64_t hash_bytes(const void* data, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

template <typename T>
std::uint64_t hash_values(const std::vector<T>& values) {
    return hash_bytes(values.data(), values.size() * sizeof(T));
}

inline std::filesystem::path make_temp_dir(const std::string& tag) {
    static int counter = 0;
    std::filesystem::path dir = std::filesystem::temp_directory_path() /
                                ("hcct_" + tag + "_" + std::to_string(::getpid()) + "_" +
                                 std::to_string(counter++));
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace hcct::testing

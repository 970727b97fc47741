#pragma once

#include <array>
#include <cstring>
#include <vector>

#include "hcct/ops.hpp"

// 3D kernels: convolution (cross-correlation convention), max pooling,
// batch normalization, trilinear resampling.

namespace hcct {

namespace detail {

// Copies one sample's channels into a zero-padded buffer [c, D+2p, H+2p, W+2p].
template <typename T>
inline void pad_sample(const T* x, std::size_t c, std::size_t D, std::size_t H, std::size_t W,
                       std::size_t pad, std::vector<T>& out) {
    std::size_t Dp = D + 2 * pad, Hp = H + 2 * pad, Wp = W + 2 * pad;
    out.assign(c * Dp * Hp * Wp, T(0));
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t z = 0; z < D; ++z) {
            for (std::size_t y = 0; y < H; ++y) {
                std::memcpy(out.data() + ((ci * Dp + z + pad) * Hp + y + pad) * Wp + pad,
                            x + ((ci * D + z) * H + y) * W, W * sizeof(T));
            }
        }
    }
}

} // namespace detail

// x [b, c_in, D, H, W] * w [c_out, c_in, k, k, k] + bias [c_out].
// Output spatial extent per axis: (E + 2*padding - k) / stride + 1.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 5) throw ShapeError("conv3d: input must be [b, c, D, H, W], got " + shape_str(xs));
    if (ws.size() != 5 || ws[2] != ws[3] || ws[3] != ws[4]) {
        throw ShapeError("conv3d: weights must be [c_out, c_in, k, k, k], got " + shape_str(ws));
    }
    if (ws[1] != xs[1]) {
        throw ShapeError("conv3d: channel mismatch: input " + shape_str(xs) + " vs weights " +
                         shape_str(ws));
    }
    if (stride < 1) throw ValueError("conv3d: stride must be >= 1");
    std::size_t B = xs[0], CI = xs[1], D = xs[2], H = xs[3], W = xs[4];
    std::size_t CO = ws[0], K = ws[2];
    if (!bias.defined() || bias.shape() != Shape{CO}) {
        throw ShapeError("conv3d: bias must be [" + std::to_string(CO) + "]");
    }
    if (K > D + 2 * padding || K > H + 2 * padding || K > W + 2 * padding) {
        throw ShapeError("conv3d: kernel " + std::to_string(K) + " larger than padded input " +
                         shape_str({D + 2 * padding, H + 2 * padding, W + 2 * padding}));
    }
    std::size_t OD = (D + 2 * padding - K) / stride + 1;
    std::size_t OH = (H + 2 * padding - K) / stride + 1;
    std::size_t OW = (W + 2 * padding - K) / stride + 1;
    std::size_t Dp = D + 2 * padding, Hp = H + 2 * padding, Wp = W + 2 * padding;

    std::vector<T> out(B * CO * OD * OH * OW);
    const T* xv = x.data().data();
    const T* wv = w.data().data();
    const T* bv = bias.data().data();
    std::vector<T> padded;
    for (std::size_t b = 0; b < B; ++b) {
        detail::pad_sample(xv + b * CI * D * H * W, CI, D, H, W, padding, padded);
        for (std::size_t co = 0; co < CO; ++co) {
            T* op = out.data() + ((b * CO + co) * OD) * OH * OW;
            std::fill(op, op + OD * OH * OW, bv[co]);
            for (std::size_t ci = 0; ci < CI; ++ci) {
                const T* xp = padded.data() + ci * Dp * Hp * Wp;
                const T* wp = wv + (co * CI + ci) * K * K * K;
                for (std::size_t kz = 0; kz < K; ++kz) {
                    for (std::size_t ky = 0; ky < K; ++ky) {
                        for (std::size_t kx = 0; kx < K; ++kx) {
                            T wval = wp[(kz * K + ky) * K + kx];
                            if (stride == 1) {
                                // Shifted-plane accumulation: contiguous inner
                                // loop over the fastest axis.
                                for (std::size_t od = 0; od < OD; ++od) {
                                    const T* splane = xp + ((od + kz) * Hp + ky) * Wp + kx;
                                    T* dplane = op + od * OH * OW;
                                    for (std::size_t oh = 0; oh < OH; ++oh) {
                                        const T* srow = splane + oh * Wp;
                                        T* drow = dplane + oh * OW;
                                        for (std::size_t ow = 0; ow < OW; ++ow) drow[ow] += wval * srow[ow];
                                    }
                                }
                            } else {
                                for (std::size_t od = 0; od < OD; ++od) {
                                    for (std::size_t oh = 0; oh < OH; ++oh) {
                                        for (std::size_t ow = 0; ow < OW; ++ow) {
                                            op[(od * OH + oh) * OW + ow] +=
                                                wval * xp[((od * stride + kz) * Hp + oh * stride + ky) * Wp +
                                                          ow * stride + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    return detail::make_op_node<T>(
        "conv3d", {B, CO, OD, OH, OW}, std::move(out), {x, w, bias},
        [=](detail::Node<T>& self) {
            detail::Node<T>& nx = *self.parents[0];
            detail::Node<T>& nw = *self.parents[1];
            detail::Node<T>& nb = *self.parents[2];
            const T* gy = self.grad.data();
            const T* xval = nx.value.data();
            const T* wval = nw.value.data();
            bool gx = detail::wants_grad(nx), gw = detail::wants_grad(nw), gb = detail::wants_grad(nb);
            if (gb) {
                for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t co = 0; co < CO; ++co) {
                        const T* gp = gy + (b * CO + co) * OD * OH * OW;
                        T acc = T(0);
                        for (std::size_t i = 0; i < OD * OH * OW; ++i) acc += gp[i];
                        nb.grad[co] += acc;
                    }
                }
            }
            if (!gx && !gw) return;
            std::vector<T> padded, dpadded;
            for (std::size_t b = 0; b < B; ++b) {
                detail::pad_sample(xval + b * CI * D * H * W, CI, D, H, W, padding, padded);
                if (gx) dpadded.assign(CI * Dp * Hp * Wp, T(0));
                for (std::size_t co = 0; co < CO; ++co) {
                    const T* gp = gy + (b * CO + co) * OD * OH * OW;
                    for (std::size_t ci = 0; ci < CI; ++ci) {
                        const T* xp = padded.data() + ci * Dp * Hp * Wp;
                        T* dxp = gx ? dpadded.data() + ci * Dp * Hp * Wp : nullptr;
                        for (std::size_t kz = 0; kz < K; ++kz) {
                            for (std::size_t ky = 0; ky < K; ++ky) {
                                for (std::size_t kx = 0; kx < K; ++kx) {
                                    std::size_t widx = ((co * CI + ci) * K * K + kz * K + ky) * K + kx;
                                    T wcur = wval[widx];
                                    T wacc = T(0);
                                    for (std::size_t od = 0; od < OD; ++od) {
                                        for (std::size_t oh = 0; oh < OH; ++oh) {
                                            const T* grow = gp + (od * OH + oh) * OW;
                                            std::size_t src =
                                                ((od * stride + kz) * Hp + oh * stride + ky) * Wp + kx;
                                            if (stride == 1) {
                                                const T* srow = xp + src;
                                                if (gw) {
                                                    for (std::size_t ow = 0; ow < OW; ++ow)
                                                        wacc += srow[ow] * grow[ow];
                                                }
                                                if (gx) {
                                                    T* drow = dxp + src;
                                                    for (std::size_t ow = 0; ow < OW; ++ow)
                                                        drow[ow] += wcur * grow[ow];
                                                }
                                            } else {
                                                for (std::size_t ow = 0; ow < OW; ++ow) {
                                                    std::size_t si = src + ow * stride;
                                                    if (gw) wacc += xp[si] * grow[ow];
                                                    if (gx) dxp[si] += wcur * grow[ow];
                                                }
                                            }
                                        }
                                    }
                                    if (gw) nw.grad[widx] += wacc;
                                }
                            }
                        }
                    }
                }
                if (gx) {
                    T* dx = nx.grad.data() + b * CI * D * H * W;
                    for (std::size_t ci = 0; ci < CI; ++ci) {
                        for (std::size_t z = 0; z < D; ++z) {
                            for (std::size_t y = 0; y < H; ++y) {
                                const T* src =
                                    dpadded.data() + ((ci * Dp + z + padding) * Hp + y + padding) * Wp + padding;
                                T* dst = dx + ((ci * D + z) * H + y) * W;
                                for (std::size_t xw = 0; xw < W; ++xw) dst[xw] += src[xw];
                            }
                        }
                    }
                }
            }
        });
}

template <typename T>
struct MaxPoolResult {
    Tensor<T> output;
    std::vector<std::size_t> argmax; // flat indices into the input
};

// Non-overlapping max pooling; spatial extents must divide by the window.
// The gradient routes to the argmax only; ties take the lowest flat index.
template <typename T>
MaxPoolResult<T> maxpool3d_with_indices(const Tensor<T>& x, std::size_t window,
                                        std::size_t stride = 0) {
    if (stride == 0) stride = window;
    if (window < 1) throw ValueError("maxpool3d: window must be >= 1");
    if (stride != window) {
        throw ValueError("maxpool3d: only stride == window is supported");
    }
    const Shape& s = x.shape();
    if (s.size() != 5) throw ShapeError("maxpool3d: input must be [b, c, D, H, W], got " + shape_str(s));
    std::size_t B = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    if (D % window || H % window || W % window) {
        throw ShapeError("maxpool3d: extents " + shape_str({D, H, W}) +
                         " not divisible by window " + std::to_string(window));
    }
    std::size_t OD = D / window, OH = H / window, OW = W / window;
    std::vector<T> out(B * C * OD * OH * OW);
    std::vector<std::size_t> argmax(out.size());
    const T* xv = x.data().data();
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* plane = xv + (b * C + c) * D * H * W;
            std::size_t base = (b * C + c) * D * H * W;
            for (std::size_t od = 0; od < OD; ++od) {
                for (std::size_t oh = 0; oh < OH; ++oh) {
                    for (std::size_t ow = 0; ow < OW; ++ow, ++o) {
                        std::size_t bz = od * window, by = oh * window, bx = ow * window;
                        std::size_t best = (bz * H + by) * W + bx;
                        T bestv = plane[best];
                        for (std::size_t kz = 0; kz < window; ++kz) {
                            for (std::size_t ky = 0; ky < window; ++ky) {
                                for (std::size_t kx = 0; kx < window; ++kx) {
                                    std::size_t idx = ((bz + kz) * H + by + ky) * W + bx + kx;
                                    if (plane[idx] > bestv) {
                                        bestv = plane[idx];
                                        best = idx;
                                    }
                                }
                            }
                        }
                        out[o] = bestv;
                        argmax[o] = base + best;
                    }
                }
            }
        }
    }
    Tensor<T> result = detail::make_op_node<T>(
        "maxpool3d", {B, C, OD, OH, OW}, std::move(out), {x},
        [argmax](detail::Node<T>& self) {
            detail::Node<T>& nx = *self.parents[0];
            if (!detail::wants_grad(nx)) return;
            for (std::size_t i = 0; i < self.grad.size(); ++i) nx.grad[argmax[i]] += self.grad[i];
        });
    return {result, std::move(argmax)};
}

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x, std::size_t window, std::size_t stride = 0) {
    return maxpool3d_with_indices(x, window, stride).output;
}

template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;

    static BatchNormState init(std::size_t channels) {
        return {std::vector<T>(channels, T(0)), std::vector<T>(channels, T(1))};
    }
};

// Per-channel normalization over (batch, D, H, W). Training mode normalizes
// with batch statistics and updates the running estimates (side effect, not
// differentiated); eval mode applies the running estimates.
template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, bool training, double momentum = 0.1,
                      double eps = 1e-5) {
    const Shape& s = x.shape();
    if (s.size() != 5) throw ShapeError("batchnorm3d: input must be [b, c, D, H, W], got " + shape_str(s));
    std::size_t B = s[0], C = s[1], S = s[2] * s[3] * s[4];
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
        throw ShapeError("batchnorm3d: gamma/beta must be [" + std::to_string(C) + "]");
    }
    if (state.running_mean.size() != C || state.running_var.size() != C) {
        throw ShapeError("batchnorm3d: running stats must have " + std::to_string(C) + " channels");
    }
    const T* xv = x.data().data();
    const T* gv = gamma.data().data();
    const T* bv = beta.data().data();
    std::size_t n = B * S;
    std::vector<T> out(x.size());

    if (!training) {
        std::vector<T> inv(C);
        for (std::size_t c = 0; c < C; ++c) {
            inv[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + eps));
        }
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t c = 0; c < C; ++c) {
                const T* src = xv + (b * C + c) * S;
                T* dst = out.data() + (b * C + c) * S;
                T mu = state.running_mean[c];
                for (std::size_t i = 0; i < S; ++i) dst[i] = gv[c] * (src[i] - mu) * inv[c] + bv[c];
            }
        }
        return detail::make_op_node<T>(
            "batchnorm3d", s, std::move(out), {x, gamma, beta},
            [B, C, S, inv, rm = state.running_mean](detail::Node<T>& self) {
                detail::Node<T>& nx = *self.parents[0];
                detail::Node<T>& ng = *self.parents[1];
                detail::Node<T>& nb = *self.parents[2];
                const T* gy = self.grad.data();
                const T* gvv = ng.value.data();
                const T* xvv = nx.value.data();
                for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t c = 0; c < C; ++c) {
                        const T* grow = gy + (b * C + c) * S;
                        const T* xrow = xvv + (b * C + c) * S;
                        if (detail::wants_grad(nx)) {
                            T* dx = nx.grad.data() + (b * C + c) * S;
                            T k = gvv[c] * inv[c];
                            for (std::size_t i = 0; i < S; ++i) dx[i] += k * grow[i];
                        }
                        if (detail::wants_grad(ng)) {
                            T acc = T(0);
                            for (std::size_t i = 0; i < S; ++i) acc += grow[i] * (xrow[i] - rm[c]) * inv[c];
                            ng.grad[c] += acc;
                        }
                        if (detail::wants_grad(nb)) {
                            T acc = T(0);
                            for (std::size_t i = 0; i < S; ++i) acc += grow[i];
                            nb.grad[c] += acc;
                        }
                    }
                }
            });
    }

    if (n <= 1) {
        throw NumericError("batchnorm3d: batch*spatial size of 1 gives degenerate statistics");
    }
    std::vector<T> xhat(x.size());
    std::vector<T> inv_std(C);
    for (std::size_t c = 0; c < C; ++c) {
        double mean = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            const T* src = xv + (b * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) mean += static_cast<double>(src[i]);
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            const T* src = xv + (b * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) {
                double d = static_cast<double>(src[i]) - mean;
                var += d * d;
            }
        }
        var /= static_cast<double>(n);
        double inv = 1.0 / std::sqrt(var + eps);
        inv_std[c] = static_cast<T>(inv);
        for (std::size_t b = 0; b < B; ++b) {
            const T* src = xv + (b * C + c) * S;
            T* xh = xhat.data() + (b * C + c) * S;
            T* dst = out.data() + (b * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) {
                xh[i] = static_cast<T>((static_cast<double>(src[i]) - mean) * inv);
                dst[i] = gv[c] * xh[i] + bv[c];
            }
        }
        state.running_mean[c] = static_cast<T>((1.0 - momentum) * static_cast<double>(state.running_mean[c]) +
                                               momentum * mean);
        // Running variance stores the unbiased estimate.
        double var_unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
        state.running_var[c] = static_cast<T>((1.0 - momentum) * static_cast<double>(state.running_var[c]) +
                                              momentum * var_unbiased);
    }
    return detail::make_op_node<T>(
        "batchnorm3d", s, std::move(out), {x, gamma, beta},
        [B, C, S, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
            detail::Node<T>& nx = *self.parents[0];
            detail::Node<T>& ng = *self.parents[1];
            detail::Node<T>& nb = *self.parents[2];
            const T* gy = self.grad.data();
            const T* gvv = ng.value.data();
            for (std::size_t c = 0; c < C; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t b = 0; b < B; ++b) {
                    const T* grow = gy + (b * C + c) * S;
                    const T* xh = xhat.data() + (b * C + c) * S;
                    for (std::size_t i = 0; i < S; ++i) {
                        sum_g += static_cast<double>(grow[i]);
                        sum_gx += static_cast<double>(grow[i]) * static_cast<double>(xh[i]);
                    }
                }
                if (detail::wants_grad(ng)) ng.grad[c] += static_cast<T>(sum_gx);
                if (detail::wants_grad(nb)) nb.grad[c] += static_cast<T>(sum_g);
                if (detail::wants_grad(nx)) {
                    double mg = sum_g / static_cast<double>(n);
                    double mgx = sum_gx / static_cast<double>(n);
                    double k = static_cast<double>(gvv[c]) * static_cast<double>(inv_std[c]);
                    for (std::size_t b = 0; b < B; ++b) {
                        const T* grow = gy + (b * C + c) * S;
                        const T* xh = xhat.data() + (b * C + c) * S;
                        T* dx = nx.grad.data() + (b * C + c) * S;
                        for (std::size_t i = 0; i < S; ++i) {
                            dx[i] += static_cast<T>(k * (static_cast<double>(grow[i]) - mg -
                                                         static_cast<double>(xh[i]) * mgx));
                        }
                    }
                }
            }
        });
}

namespace detail {

struct AxisSamples {
    std::vector<std::size_t> lo, hi;
    std::vector<double> frac;
};

// Corner-aligned sample positions: dst i maps to i*(n-1)/(m-1).
inline AxisSamples axis_samples(std::size_t src, std::size_t dst) {
    AxisSamples s;
    s.lo.resize(dst);
    s.hi.resize(dst);
    s.frac.resize(dst);
    for (std::size_t i = 0; i < dst; ++i) {
        double pos = (dst == 1 || src == 1)
                         ? 0.0
                         : static_cast<double>(i) * static_cast<double>(src - 1) /
                               static_cast<double>(dst - 1);
        std::size_t lo = std::min(static_cast<std::size_t>(pos), src - 1);
        s.lo[i] = lo;
        s.hi[i] = std::min(lo + 1, src - 1);
        s.frac[i] = pos - static_cast<double>(lo);
    }
    return s;
}

} // namespace detail

// Corner-aligned trilinear resampling of a [D, H, W] tensor to any target
// extents (up or down). Output values are convex combinations of inputs.
template <typename T>
Tensor<T> trilinear_resize3d(const Tensor<T>& x, std::size_t td, std::size_t th, std::size_t tw) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw ShapeError("trilinear_resize3d: input must be [D, H, W], got " + shape_str(s));
    if (td < 1 || th < 1 || tw < 1) throw ValueError("trilinear_resize3d: target extents must be >= 1");
    std::size_t D = s[0], H = s[1], W = s[2];
    auto az = detail::axis_samples(D, td);
    auto ay = detail::axis_samples(H, th);
    auto ax = detail::axis_samples(W, tw);
    std::vector<T> out(td * th * tw);
    const T* xv = x.data().data();
    auto at = [&](std::size_t z, std::size_t y, std::size_t xx) { return static_cast<double>(xv[(z * H + y) * W + xx]); };
    for (std::size_t z = 0; z < td; ++z) {
        for (std::size_t y = 0; y < th; ++y) {
            for (std::size_t xx = 0; xx < tw; ++xx) {
                double fz = az.frac[z], fy = ay.frac[y], fx = ax.frac[xx];
                double c00 = at(az.lo[z], ay.lo[y], ax.lo[xx]) * (1 - fx) + at(az.lo[z], ay.lo[y], ax.hi[xx]) * fx;
                double c01 = at(az.lo[z], ay.hi[y], ax.lo[xx]) * (1 - fx) + at(az.lo[z], ay.hi[y], ax.hi[xx]) * fx;
                double c10 = at(az.hi[z], ay.lo[y], ax.lo[xx]) * (1 - fx) + at(az.hi[z], ay.lo[y], ax.hi[xx]) * fx;
                double c11 = at(az.hi[z], ay.hi[y], ax.lo[xx]) * (1 - fx) + at(az.hi[z], ay.hi[y], ax.hi[xx]) * fx;
                double c0 = c00 * (1 - fy) + c01 * fy;
                double c1 = c10 * (1 - fy) + c11 * fy;
                out[(z * th + y) * tw + xx] = static_cast<T>(c0 * (1 - fz) + c1 * fz);
            }
        }
    }
    return detail::make_op_node<T>(
        "trilinear_resize3d", {td, th, tw}, std::move(out), {x},
        [az, ay, ax, H, W, td, th, tw](detail::Node<T>& self) {
            detail::Node<T>& nx = *self.parents[0];
            if (!detail::wants_grad(nx)) return;
            const T* gy = self.grad.data();
            auto scatter = [&](std::size_t z, std::size_t y, std::size_t xx, double wgt, T g) {
                nx.grad[(z * H + y) * W + xx] += static_cast<T>(wgt * static_cast<double>(g));
            };
            for (std::size_t z = 0; z < td; ++z) {
                for (std::size_t y = 0; y < th; ++y) {
                    for (std::size_t xx = 0; xx < tw; ++xx) {
                        T g = gy[(z * th + y) * tw + xx];
                        double fz = az.frac[z], fy = ay.frac[y], fx = ax.frac[xx];
                        scatter(az.lo[z], ay.lo[y], ax.lo[xx], (1 - fz) * (1 - fy) * (1 - fx), g);
                        scatter(az.lo[z], ay.lo[y], ax.hi[xx], (1 - fz) * (1 - fy) * fx, g);
                        scatter(az.lo[z], ay.hi[y], ax.lo[xx], (1 - fz) * fy * (1 - fx), g);
                        scatter(az.lo[z], ay.hi[y], ax.hi[xx], (1 - fz) * fy * fx, g);
                        scatter(az.hi[z], ay.lo[y], ax.lo[xx], fz * (1 - fy) * (1 - fx), g);
                        scatter(az.hi[z], ay.lo[y], ax.hi[xx], fz * (1 - fy) * fx, g);
                        scatter(az.hi[z], ay.hi[y], ax.lo[xx], fz * fy * (1 - fx), g);
                        scatter(az.hi[z], ay.hi[y], ax.hi[xx], fz * fy * fx, g);
                    }
                }
            }
        });
}

// Upsampling-only wrapper: every target extent must be >= the source extent.
template <typename T>
Tensor<T> trilinear_upsample(const Tensor<T>& x, std::size_t td, std::size_t th, std::size_t tw) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw ShapeError("trilinear_upsample: input must be [D, H, W], got " + shape_str(s));
    if (td < s[0] || th < s[1] || tw < s[2]) {
        throw ValueError("trilinear_upsample: target " + shape_str({td, th, tw}) +
                         " smaller than source " + shape_str(s));
    }
    return trilinear_resize3d(x, td, th, tw);
}

} // namespace hcct

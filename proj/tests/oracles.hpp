#pragma once

// Independent reference implementations used as test oracles. They are
// written as plain nested loops over raw vectors, sharing nothing with the
// library kernels beyond the tensor container.

#include <cmath>
#include <cstdint>
#include <vector>

#include "da2net/rng.hpp"
#include "da2net/tensor.hpp"

namespace oracle {

template <typename T>
da2::BasicTensor<T> random(da2::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    da2::Rng rng(seed, 0x7E57);
    da2::BasicTensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(lo + (hi - lo) * rng.uniform());
    return t;
}

/// Direct grouped cross-correlation: six nested loops plus the group split.
template <typename T>
da2::BasicTensor<T> conv2d(const da2::BasicTensor<T>& x, const da2::BasicTensor<T>& w, const std::vector<T>* bias,
                           int groups, int stride, int pad) {
    const std::int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Cout = w.dim(0), cpg = w.dim(1), K = w.dim(2);
    const std::int64_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
    const std::int64_t out_per_group = Cout / groups;
    (void)Cin;
    da2::BasicTensor<T> y({N, Cout, Ho, Wo});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t co = 0; co < Cout; ++co) {
            const std::int64_t grp = co / out_per_group;
            for (std::int64_t oh = 0; oh < Ho; ++oh)
                for (std::int64_t ow = 0; ow < Wo; ++ow) {
                    double acc = bias ? static_cast<double>((*bias)[static_cast<std::size_t>(co)]) : 0.0;
                    for (std::int64_t ci = 0; ci < cpg; ++ci)
                        for (std::int64_t kh = 0; kh < K; ++kh)
                            for (std::int64_t kw = 0; kw < K; ++kw) {
                                const std::int64_t ih = oh * stride - pad + kh, iw = ow * stride - pad + kw;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += static_cast<double>(x.at(n, grp * cpg + ci, ih, iw)) *
                                       static_cast<double>(w.at(co, ci, kh, kw));
                            }
                    y.at(n, co, oh, ow) = static_cast<T>(acc);
                }
        }
    return y;
}

/// Sliding-window channel convolution with zero padding (alpha-1)/2.
template <typename T>
da2::BasicTensor<T> conv1d(const da2::BasicTensor<T>& d, const da2::BasicTensor<T>& k) {
    const std::int64_t N = d.dim(0), C = d.dim(1);
    const std::int64_t a = static_cast<std::int64_t>(k.size()), half = (a - 1) / 2;
    da2::BasicTensor<T> out({N, C});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            double acc = 0;
            for (std::int64_t i = 0; i < a; ++i) {
                const std::int64_t src = c - half + i;
                if (src >= 0 && src < C) acc += static_cast<double>(k[i]) * d[n * C + src];
            }
            out[n * C + c] = static_cast<T>(acc);
        }
    return out;
}

template <typename T>
da2::BasicTensor<T> gap(const da2::BasicTensor<T>& x) {
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    da2::BasicTensor<T> out({N, C});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            double s = 0;
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 0; w < W; ++w) s += x.at(n, c, h, w);
            out[n * C + c] = static_cast<T>(s / static_cast<double>(H * W));
        }
    return out;
}

/// BN with fixed statistics: gamma * (x - mean) / sqrt(var + eps) + beta.
template <typename T>
da2::BasicTensor<T> bn_eval(const da2::BasicTensor<T>& x, const da2::BasicTensor<T>& gamma,
                            const da2::BasicTensor<T>& beta, const da2::BasicTensor<T>& mean,
                            const da2::BasicTensor<T>& var, double eps) {
    da2::BasicTensor<T> y(x.shape());
    const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < HW; ++i) {
                const std::size_t k = static_cast<std::size_t>((n * C + c) * HW + i);
                y[k] = static_cast<T>(gamma[c] * (x[k] - mean[c]) / std::sqrt(static_cast<double>(var[c]) + eps) +
                                      beta[c]);
            }
    return y;
}

template <typename T>
da2::BasicTensor<T> sigmoid(const da2::BasicTensor<T>& x) {
    da2::BasicTensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x[i]))));
    return y;
}

/// x (N,C,H,W) times gate (N,C).
template <typename T>
da2::BasicTensor<T> gate(const da2::BasicTensor<T>& x, const da2::BasicTensor<T>& g) {
    da2::BasicTensor<T> y(x.shape());
    const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < HW; ++i) {
                const std::size_t k = static_cast<std::size_t>((n * C + c) * HW + i);
                y[k] = x[k] * g[n * C + c];
            }
    return y;
}

template <typename T>
double max_abs_diff(const da2::BasicTensor<T>& a, const da2::BasicTensor<T>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

}  // namespace oracle

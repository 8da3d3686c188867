#include "da2net/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "da2net/log.hpp"

namespace da2 {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using ConstMapVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

struct ConvDims {
    std::int64_t N, Cin, H, W, Cout, k, Ho, Wo, groups, cg_in, cg_out;
    int stride, pad;
};

template <typename T>
ConvDims conv_dims(const BasicTensor<T>& x, const BasicTensor<T>& w, ConvGeometry g) {
    if (x.rank() != 4) throw ShapeError("conv2d input must be rank 4 (N,C,H,W), got " + shape_str(x.shape()));
    if (w.rank() != 4) throw ShapeError("conv2d weight must be rank 4, got " + shape_str(w.shape()));
    if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d kernel must be square, got " + shape_str(w.shape()));
    if (g.groups < 1 || g.stride < 1 || g.padding < 0) throw ShapeError("conv2d groups/stride must be >= 1, padding >= 0");
    ConvDims d{};
    d.N = x.dim(0);
    d.Cin = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.Cout = w.dim(0);
    d.k = w.dim(2);
    d.groups = g.groups;
    d.stride = g.stride;
    d.pad = g.padding;
    if (d.Cin % d.groups != 0) {
        throw ShapeError("conv2d: C_in=" + std::to_string(d.Cin) + " not divisible by groups=" + std::to_string(d.groups));
    }
    if (d.Cout % d.groups != 0) {
        throw ShapeError("conv2d: C_out=" + std::to_string(d.Cout) + " not divisible by groups=" +
                         std::to_string(d.groups));
    }
    d.cg_in = d.Cin / d.groups;
    d.cg_out = d.Cout / d.groups;
    if (w.dim(1) != d.cg_in) {
        throw ShapeError("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels per group, input has " +
                         std::to_string(d.cg_in));
    }
    d.Ho = conv_out_extent(d.H, d.k, d.stride, d.pad);
    d.Wo = conv_out_extent(d.W, d.k, d.stride, d.pad);
    return d;
}

// First and last output column whose tap (offset kw) lands inside [0, W).
inline void valid_range(std::int64_t W, std::int64_t Wo, std::int64_t kw, int stride, int pad, std::int64_t& lo,
                        std::int64_t& hi) {
    // iw = ow*stride + kw - pad
    std::int64_t num = pad - kw;
    lo = num <= 0 ? 0 : (num + stride - 1) / stride;
    std::int64_t top = W - 1 + pad - kw;
    hi = top < 0 ? -1 : std::min<std::int64_t>(Wo - 1, top / stride);
}

template <typename T>
void im2col(const T* x, const ConvDims& d, T* cols) {
    const std::int64_t P = d.Ho * d.Wo;
    for (std::int64_t ci = 0; ci < d.cg_in; ++ci) {
        const T* plane = x + ci * d.H * d.W;
        for (std::int64_t kh = 0; kh < d.k; ++kh) {
            for (std::int64_t kw = 0; kw < d.k; ++kw) {
                T* row = cols + ((ci * d.k + kh) * d.k + kw) * P;
                std::int64_t lo, hi;
                valid_range(d.W, d.Wo, kw, d.stride, d.pad, lo, hi);
                for (std::int64_t oh = 0; oh < d.Ho; ++oh) {
                    T* out = row + oh * d.Wo;
                    const std::int64_t ih = oh * d.stride + kh - d.pad;
                    if (ih < 0 || ih >= d.H || hi < lo) {
                        std::fill(out, out + d.Wo, T(0));
                        continue;
                    }
                    std::fill(out, out + lo, T(0));
                    const T* src = plane + ih * d.W + kw - d.pad;
                    if (d.stride == 1) {
                        std::copy(src + lo, src + hi + 1, out + lo);
                    } else {
                        for (std::int64_t ow = lo; ow <= hi; ++ow) out[ow] = src[ow * d.stride];
                    }
                    std::fill(out + hi + 1, out + d.Wo, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, const ConvDims& d, T* x) {
    const std::int64_t P = d.Ho * d.Wo;
    for (std::int64_t ci = 0; ci < d.cg_in; ++ci) {
        T* plane = x + ci * d.H * d.W;
        for (std::int64_t kh = 0; kh < d.k; ++kh) {
            for (std::int64_t kw = 0; kw < d.k; ++kw) {
                const T* row = cols + ((ci * d.k + kh) * d.k + kw) * P;
                std::int64_t lo, hi;
                valid_range(d.W, d.Wo, kw, d.stride, d.pad, lo, hi);
                for (std::int64_t oh = 0; oh < d.Ho; ++oh) {
                    const std::int64_t ih = oh * d.stride + kh - d.pad;
                    if (ih < 0 || ih >= d.H) continue;
                    const T* in = row + oh * d.Wo;
                    T* dst = plane + ih * d.W + kw - d.pad;
                    if (d.stride == 1) {
                        for (std::int64_t ow = lo; ow <= hi; ++ow) dst[ow] += in[ow];
                    } else {
                        for (std::int64_t ow = lo; ow <= hi; ++ow) dst[ow * d.stride] += in[ow];
                    }
                }
            }
        }
    }
}

// One input and one output channel per group. Each plane is copied into a
// zero-padded scratch buffer so the inner loops run without bounds checks.
template <typename T>
void pad_plane(const T* plane, const ConvDims& d, T* buf) {
    const std::int64_t Wp = d.W + 2 * d.pad;
    for (std::int64_t ih = 0; ih < d.H; ++ih) std::copy(plane + ih * d.W, plane + (ih + 1) * d.W, buf + (ih + d.pad) * Wp + d.pad);
}

template <typename T>
void depthwise_forward(const T* x, const T* w, const ConvDims& d, T* y) {
    const std::int64_t Hp = d.H + 2 * d.pad, Wp = d.W + 2 * d.pad, s = d.stride;
    AlignedVector<T> buf(static_cast<std::size_t>(Hp * Wp), T(0));
    for (std::int64_t n = 0; n < d.N; ++n) {
        for (std::int64_t c = 0; c < d.Cin; ++c) {
            pad_plane(x + (n * d.Cin + c) * d.H * d.W, d, buf.data());
            const T* kern = w + c * d.k * d.k;
            T* out = y + (n * d.Cout + c) * d.Ho * d.Wo;
            for (std::int64_t oh = 0; oh < d.Ho; ++oh) {
                T* dst = out + oh * d.Wo;
                for (std::int64_t kh = 0; kh < d.k; ++kh) {
                    const T* src = buf.data() + (oh * s + kh) * Wp;
                    for (std::int64_t kw = 0; kw < d.k; ++kw) {
                        const T wv = kern[kh * d.k + kw];
                        const T* sp = src + kw;
                        if (s == 1) {
                            for (std::int64_t ow = 0; ow < d.Wo; ++ow) dst[ow] += wv * sp[ow];
                        } else {
                            for (std::int64_t ow = 0; ow < d.Wo; ++ow) dst[ow] += wv * sp[ow * s];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void depthwise_backward(const T* x, const T* w, const T* gy, const ConvDims& d, T* dx, T* dw) {
    using Strided = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>, 0, Eigen::InnerStride<>>;
    const std::int64_t Hp = d.H + 2 * d.pad, Wp = d.W + 2 * d.pad, s = d.stride;
    AlignedVector<T> buf(static_cast<std::size_t>(Hp * Wp), T(0));
    AlignedVector<T> dbuf(dx ? static_cast<std::size_t>(Hp * Wp) : 0);
    for (std::int64_t n = 0; n < d.N; ++n) {
        for (std::int64_t c = 0; c < d.Cin; ++c) {
            pad_plane(x + (n * d.Cin + c) * d.H * d.W, d, buf.data());
            if (dx) std::fill(dbuf.begin(), dbuf.end(), T(0));
            const T* kern = w + c * d.k * d.k;
            T* dkern = dw + c * d.k * d.k;
            const T* g = gy + (n * d.Cout + c) * d.Ho * d.Wo;
            for (std::int64_t oh = 0; oh < d.Ho; ++oh) {
                const T* grow = g + oh * d.Wo;
                const ConstMapVec<T> gv(grow, d.Wo);
                for (std::int64_t kh = 0; kh < d.k; ++kh) {
                    const std::int64_t row = (oh * s + kh) * Wp;
                    for (std::int64_t kw = 0; kw < d.k; ++kw) {
                        const T* sp = buf.data() + row + kw;
                        if (s == 1) {
                            dkern[kh * d.k + kw] += gv.dot(ConstMapVec<T>(sp, d.Wo));
                        } else {
                            dkern[kh * d.k + kw] += gv.dot(Strided(sp, d.Wo, Eigen::InnerStride<>(s)));
                        }
                        if (dx) {
                            const T wv = kern[kh * d.k + kw];
                            T* dp = dbuf.data() + row + kw;
                            if (s == 1) {
                                for (std::int64_t ow = 0; ow < d.Wo; ++ow) dp[ow] += wv * grow[ow];
                            } else {
                                for (std::int64_t ow = 0; ow < d.Wo; ++ow) dp[ow * s] += wv * grow[ow];
                            }
                        }
                    }
                }
            }
            if (dx) {
                T* dplane = dx + (n * d.Cin + c) * d.H * d.W;
                for (std::int64_t ih = 0; ih < d.H; ++ih) {
                    const T* src = dbuf.data() + (ih + d.pad) * Wp + d.pad;
                    for (std::int64_t iw = 0; iw < d.W; ++iw) dplane[ih * d.W + iw] += src[iw];
                }
            }
        }
    }
}

}  // namespace

template <typename T>
BatchNormParams<T> BatchNormParams<T>::identity(std::int64_t channels) {
    BatchNormParams p;
    p.gamma = BasicTensor<T>({channels}, T(1));
    p.beta = BasicTensor<T>({channels}, T(0));
    p.running_mean = BasicTensor<T>({channels}, T(0));
    p.running_var = BasicTensor<T>({channels}, T(1));
    return p;
}

std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, int stride, int padding) {
    const std::int64_t span = in + 2 * padding - kernel;
    if (span < 0 || stride < 1) {
        throw ShapeError("conv: non-positive output extent (input " + std::to_string(in) + ", kernel " +
                         std::to_string(kernel) + ", padding " + std::to_string(padding) + ")");
    }
    return span / stride + 1;
}

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias,
                              ConvGeometry geom) {
    const ConvDims d = conv_dims(x, weight, geom);
    if (bias && (bias->rank() != 1 || bias->dim(0) != d.Cout)) {
        throw ShapeError("conv2d bias must have shape [" + std::to_string(d.Cout) + "]");
    }
    BasicTensor<T> y({d.N, d.Cout, d.Ho, d.Wo});
    const std::int64_t P = d.Ho * d.Wo;
    if (d.cg_in == 1 && d.cg_out == 1) {
        depthwise_forward(x.ptr(), weight.ptr(), d, y.ptr());
    } else {
        const std::int64_t K = d.cg_in * d.k * d.k;
        AlignedVector<T> cols(static_cast<std::size_t>(K * P));
        for (std::int64_t n = 0; n < d.N; ++n) {
            for (std::int64_t g = 0; g < d.groups; ++g) {
                const T* xg = x.ptr() + (n * d.Cin + g * d.cg_in) * d.H * d.W;
                im2col(xg, d, cols.data());
                ConstMapMat<T> wg(weight.ptr() + g * d.cg_out * K, d.cg_out, K);
                ConstMapMat<T> cm(cols.data(), K, P);
                MapMat<T> yg(y.ptr() + (n * d.Cout + g * d.cg_out) * P, d.cg_out, P);
                yg.noalias() = wg * cm;
            }
        }
    }
    if (bias) {
        for (std::int64_t n = 0; n < d.N; ++n) {
            for (std::int64_t c = 0; c < d.Cout; ++c) {
                T* out = y.ptr() + (n * d.Cout + c) * P;
                const T b = (*bias)[static_cast<std::size_t>(c)];
                for (std::int64_t p = 0; p < P; ++p) out[p] += b;
            }
        }
    }
    return y;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight, bool has_bias,
                               ConvGeometry geom, const BasicTensor<T>& grad_out, bool need_dx) {
    const ConvDims d = conv_dims(x, weight, geom);
    const std::int64_t P = d.Ho * d.Wo;
    if (grad_out.shape() != Shape{d.N, d.Cout, d.Ho, d.Wo}) {
        throw ShapeError("conv2d backward: gradient shape " + shape_str(grad_out.shape()) + " does not match output");
    }
    Conv2dGrads<T> out;
    out.dweight = BasicTensor<T>(weight.shape());
    if (need_dx) out.dx = BasicTensor<T>(x.shape());
    if (d.cg_in == 1 && d.cg_out == 1) {
        depthwise_backward(x.ptr(), weight.ptr(), grad_out.ptr(), d, need_dx ? out.dx.ptr() : nullptr,
                           out.dweight.ptr());
    } else {
        const std::int64_t K = d.cg_in * d.k * d.k;
        AlignedVector<T> cols(static_cast<std::size_t>(K * P));
        AlignedVector<T> dcols(need_dx ? static_cast<std::size_t>(K * P) : 0);
        for (std::int64_t n = 0; n < d.N; ++n) {
            for (std::int64_t g = 0; g < d.groups; ++g) {
                const T* xg = x.ptr() + (n * d.Cin + g * d.cg_in) * d.H * d.W;
                im2col(xg, d, cols.data());
                ConstMapMat<T> cm(cols.data(), K, P);
                ConstMapMat<T> gy(grad_out.ptr() + (n * d.Cout + g * d.cg_out) * P, d.cg_out, P);
                MapMat<T> dwg(out.dweight.ptr() + g * d.cg_out * K, d.cg_out, K);
                dwg.noalias() += gy * cm.transpose();
                if (need_dx) {
                    ConstMapMat<T> wg(weight.ptr() + g * d.cg_out * K, d.cg_out, K);
                    MapMat<T> dc(dcols.data(), K, P);
                    dc.noalias() = wg.transpose() * gy;
                    col2im_add(dcols.data(), d, out.dx.ptr() + (n * d.Cin + g * d.cg_in) * d.H * d.W);
                }
            }
        }
    }
    if (has_bias) {
        out.dbias = BasicTensor<T>({d.Cout});
        for (std::int64_t n = 0; n < d.N; ++n) {
            for (std::int64_t c = 0; c < d.Cout; ++c) {
                const T* g = grad_out.ptr() + (n * d.Cout + c) * P;
                T acc = 0;
                for (std::int64_t p = 0; p < P; ++p) acc += g[p];
                out.dbias[static_cast<std::size_t>(c)] += acc;
            }
        }
    }
    return out;
}

namespace {

template <typename T>
void check_conv1d(const BasicTensor<T>& d, const BasicTensor<T>& kernel) {
    if (d.rank() != 2) throw ShapeError("conv1d_channel expects a (N,C) descriptor, got " + shape_str(d.shape()));
    if (kernel.rank() != 1) throw ShapeError("conv1d_channel kernel must be rank 1");
    const auto alpha = kernel.dim(0);
    if (alpha % 2 == 0) {
        throw ConfigError("alpha=" + std::to_string(alpha) + " must be odd (alpha = 2y+1)");
    }
    if (alpha < 3) throw ConfigError("alpha=" + std::to_string(alpha) + " must be >= 3 (alpha = 2y+1, y >= 1)");
}

}  // namespace

template <typename T>
BasicTensor<T> conv1d_channel(const BasicTensor<T>& d, const BasicTensor<T>& kernel, T bias) {
    check_conv1d(d, kernel);
    const auto N = d.dim(0), C = d.dim(1), alpha = kernel.dim(0), half = (alpha - 1) / 2;
    if (alpha > C) {
        warn("conv1d_channel: alpha=" + std::to_string(alpha) + " exceeds channel count " + std::to_string(C));
    }
    BasicTensor<T> out(d.shape());
    for (std::int64_t n = 0; n < N; ++n) {
        const T* row = d.ptr() + n * C;
        T* dst = out.ptr() + n * C;
        for (std::int64_t c = 0; c < C; ++c) {
            T acc = bias;
            const std::int64_t i_lo = std::max<std::int64_t>(0, half - c);
            const std::int64_t i_hi = std::min<std::int64_t>(alpha, C - c + half);
            for (std::int64_t i = i_lo; i < i_hi; ++i) acc += kernel[static_cast<std::size_t>(i)] * row[c - half + i];
            dst[c] = acc;
        }
    }
    return out;
}

template <typename T>
Conv1dGrads<T> conv1d_channel_backward(const BasicTensor<T>& d, const BasicTensor<T>& kernel,
                                       const BasicTensor<T>& grad_out) {
    check_conv1d(d, kernel);
    if (grad_out.shape() != d.shape()) throw ShapeError("conv1d_channel backward: gradient shape mismatch");
    const auto N = d.dim(0), C = d.dim(1), alpha = kernel.dim(0), half = (alpha - 1) / 2;
    Conv1dGrads<T> out{BasicTensor<T>(d.shape()), BasicTensor<T>(kernel.shape()), T(0)};
    for (std::int64_t n = 0; n < N; ++n) {
        const T* row = d.ptr() + n * C;
        const T* g = grad_out.ptr() + n * C;
        T* drow = out.dd.ptr() + n * C;
        for (std::int64_t c = 0; c < C; ++c) {
            out.dbias += g[c];
            const std::int64_t i_lo = std::max<std::int64_t>(0, half - c);
            const std::int64_t i_hi = std::min<std::int64_t>(alpha, C - c + half);
            for (std::int64_t i = i_lo; i < i_hi; ++i) {
                out.dkernel[static_cast<std::size_t>(i)] += g[c] * row[c - half + i];
                drow[c - half + i] += g[c] * kernel[static_cast<std::size_t>(i)];
            }
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool expects (N,C,H,W), got " + shape_str(x.shape()));
    const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    BasicTensor<T> out({N, C});
    for (std::int64_t i = 0; i < N * C; ++i) {
        const T* p = x.ptr() + i * HW;
        T acc = 0;
        for (std::int64_t j = 0; j < HW; ++j) acc += p[j];
        out[static_cast<std::size_t>(i)] = acc / static_cast<T>(HW);
    }
    return out;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& x_shape, const BasicTensor<T>& grad_out) {
    const auto N = x_shape.at(0), C = x_shape.at(1), HW = x_shape.at(2) * x_shape.at(3);
    if (grad_out.shape() != Shape{N, C}) throw ShapeError("global_avg_pool backward: gradient shape mismatch");
    BasicTensor<T> dx(x_shape);
    for (std::int64_t i = 0; i < N * C; ++i) {
        const T g = grad_out[static_cast<std::size_t>(i)] / static_cast<T>(HW);
        std::fill(dx.ptr() + i * HW, dx.ptr() + (i + 1) * HW, g);
    }
    return dx;
}

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, BatchNormParams<T>& p, Mode mode, BatchNormCache<T>* cache) {
    if (x.rank() < 2) throw ShapeError("batch_norm expects at least (N,C)");
    const auto N = x.dim(0), C = x.dim(1);
    const auto S = numel(x.shape()) / (N * C);
    if (p.gamma.size() != static_cast<std::size_t>(C) || p.beta.size() != static_cast<std::size_t>(C) ||
        p.running_mean.size() != static_cast<std::size_t>(C) || p.running_var.size() != static_cast<std::size_t>(C)) {
        throw ShapeError("batch_norm parameters do not match " + std::to_string(C) + " channels");
    }
    const std::int64_t M = N * S;
    if (mode == Mode::Train && M < 2) {
        throw ShapeError("batch_norm train mode needs at least 2 values per channel (variance undefined)");
    }
    BasicTensor<T> y(x.shape());
    BatchNormCache<T> local;
    BatchNormCache<T>& cc = cache ? *cache : local;
    cc.mode = mode;
    cc.xhat = BasicTensor<T>(x.shape());
    cc.inv_std.assign(static_cast<std::size_t>(C), T(0));
    for (std::int64_t c = 0; c < C; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        T mean, var;
        if (mode == Mode::Train) {
            // Statistics accumulate in double for float inputs too.
            using Plane = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
            double sum = 0;
            for (std::int64_t n = 0; n < N; ++n) {
                sum += Plane(x.ptr() + (n * C + c) * S, S).template cast<double>().sum();
            }
            const double m = sum / static_cast<double>(M);
            double sq = 0;
            for (std::int64_t n = 0; n < N; ++n) {
                sq += (Plane(x.ptr() + (n * C + c) * S, S).template cast<double>() - m).square().sum();
            }
            mean = static_cast<T>(m);
            var = static_cast<T>(sq / static_cast<double>(M));
            const T mom = static_cast<T>(p.momentum);
            const T unbiased = static_cast<T>(sq / static_cast<double>(M - 1));
            p.running_mean[ci] = (T(1) - mom) * p.running_mean[ci] + mom * mean;
            p.running_var[ci] = (T(1) - mom) * p.running_var[ci] + mom * unbiased;
        } else {
            mean = p.running_mean[ci];
            var = p.running_var[ci];
        }
        const T inv = T(1) / std::sqrt(var + static_cast<T>(p.epsilon));
        cc.inv_std[ci] = inv;
        const T g = p.gamma[ci], b = p.beta[ci];
        for (std::int64_t n = 0; n < N; ++n) {
            const std::int64_t base = (n * C + c) * S;
            const T* px = x.ptr() + base;
            T* ph = cc.xhat.ptr() + base;
            T* py = y.ptr() + base;
            for (std::int64_t s = 0; s < S; ++s) {
                const T xh = (px[s] - mean) * inv;
                ph[s] = xh;
                py[s] = g * xh + b;
            }
        }
    }
    return y;
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>& gamma, const BatchNormCache<T>& cache,
                                      const BasicTensor<T>& grad_out) {
    const auto& xhat = cache.xhat;
    if (grad_out.shape() != xhat.shape()) throw ShapeError("batch_norm backward: gradient shape mismatch");
    const auto N = xhat.dim(0), C = xhat.dim(1);
    const auto S = numel(xhat.shape()) / (N * C);
    const auto M = static_cast<T>(N * S);
    BatchNormGrads<T> out{BasicTensor<T>(xhat.shape()), BasicTensor<T>({C}), BasicTensor<T>({C})};
    for (std::int64_t c = 0; c < C; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        T sum_g = 0, sum_gx = 0;
        for (std::int64_t n = 0; n < N; ++n) {
            const std::int64_t base = (n * C + c) * S;
            const ConstMapVec<T> g(grad_out.ptr() + base, S);
            sum_g += g.sum();
            sum_gx += g.dot(ConstMapVec<T>(xhat.ptr() + base, S));
        }
        out.dgamma[ci] = sum_gx;
        out.dbeta[ci] = sum_g;
        const T scale = gamma[ci] * cache.inv_std[ci];
        for (std::int64_t n = 0; n < N; ++n) {
            const std::int64_t base = (n * C + c) * S;
            const T* g = grad_out.ptr() + base;
            const T* xh = xhat.ptr() + base;
            T* dx = out.dx.ptr() + base;
            if (cache.mode == Mode::Train) {
                const T mg = sum_g / M, mgx = sum_gx / M;
                for (std::int64_t s = 0; s < S; ++s) dx[s] = scale * (g[s] - mg - xh[s] * mgx);
            } else {
                for (std::int64_t s = 0; s < S; ++s) dx[s] = scale * g[s];
            }
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
    // exp(min(x,0)) / (1 + exp(-|x|)) equals 1/(1+e^-x) for x >= 0 and
    // e^x/(1+e^x) below zero: no overflow and no data-dependent branch.
    BasicTensor<T> y(x.shape());
    const auto n = static_cast<Eigen::Index>(x.size());
    const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> xv(x.ptr(), n);
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> yv(y.ptr(), n);
    yv = xv.min(T(0)).exp() / (T(1) + (-xv.abs()).exp());
    return y;
}

template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& y, const BasicTensor<T>& grad_out) {
    BasicTensor<T> dx(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = grad_out[i] * y[i] * (T(1) - y[i]);
    return dx;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    BasicTensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) {
    BasicTensor<T> dx(x.shape());
    const auto n = static_cast<Eigen::Index>(x.size());
    using CArr = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(dx.ptr(), n) =
        CArr(grad_out.ptr(), n) * (CArr(x.ptr(), n) > T(0)).template cast<T>();
    return dx;
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias) {
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
    }
    const auto N = x.dim(0), in = x.dim(1), outf = weight.dim(0);
    BasicTensor<T> y({N, outf});
    MapMat<T>(y.ptr(), N, outf).noalias() =
        ConstMapMat<T>(x.ptr(), N, in) * ConstMapMat<T>(weight.ptr(), outf, in).transpose();
    if (bias) {
        if (bias->size() != static_cast<std::size_t>(outf)) throw ShapeError("linear: bias size mismatch");
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t o = 0; o < outf; ++o) y[static_cast<std::size_t>(n * outf + o)] += (*bias)[static_cast<std::size_t>(o)];
    }
    return y;
}

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                               const BasicTensor<T>& grad_out) {
    const auto N = x.dim(0), in = x.dim(1), outf = weight.dim(0);
    if (grad_out.shape() != Shape{N, outf}) throw ShapeError("linear backward: gradient shape mismatch");
    LinearGrads<T> g{BasicTensor<T>(x.shape()), BasicTensor<T>(weight.shape()), BasicTensor<T>({outf})};
    ConstMapMat<T> gy(grad_out.ptr(), N, outf);
    MapMat<T>(g.dx.ptr(), N, in).noalias() = gy * ConstMapMat<T>(weight.ptr(), outf, in);
    MapMat<T>(g.dweight.ptr(), outf, in).noalias() = gy.transpose() * ConstMapMat<T>(x.ptr(), N, in);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < outf; ++o) g.dbias[static_cast<std::size_t>(o)] += grad_out[static_cast<std::size_t>(n * outf + o)];
    return g;
}

template <typename T>
LossAndGrad<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy expects (N,K) logits");
    const auto N = logits.dim(0), K = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != N) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(N));
    }
    LossAndGrad<T> out{0.0, BasicTensor<T>(logits.shape())};
    double total = 0;
    for (std::int64_t n = 0; n < N; ++n) {
        const int label = labels[static_cast<std::size_t>(n)];
        if (label < 0 || label >= K) {
            throw ShapeError("cross_entropy: label " + std::to_string(label) + " out of range [0," + std::to_string(K) +
                             ")");
        }
        const T* row = logits.ptr() + n * K;
        T* grow = out.grad.ptr() + n * K;
        const T mx = *std::max_element(row, row + K);
        double z = 0;
        for (std::int64_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k] - mx));
        const double lse = static_cast<double>(mx) + std::log(z);
        total += lse - static_cast<double>(row[label]);
        for (std::int64_t k = 0; k < K; ++k) {
            const double p = std::exp(static_cast<double>(row[k]) - lse);
            grow[k] = static_cast<T>((p - (k == label ? 1.0 : 0.0)) / static_cast<double>(N));
        }
    }
    out.loss = total / static_cast<double>(N);
    return out;
}

#define DA2_INSTANTIATE_OPS(T)                                                                                     \
    template struct BatchNormParams<T>;                                                                            \
    template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*,   \
                                           ConvGeometry);                                                          \
    template Conv2dGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, bool, ConvGeometry,      \
                                            const BasicTensor<T>&, bool);                                          \
    template BasicTensor<T> conv1d_channel(const BasicTensor<T>&, const BasicTensor<T>&, T);                      \
    template Conv1dGrads<T> conv1d_channel_backward(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                                    const BasicTensor<T>&);                                        \
    template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                               \
    template BasicTensor<T> global_avg_pool_backward(const Shape&, const BasicTensor<T>&);                        \
    template BasicTensor<T> batch_norm(const BasicTensor<T>&, BatchNormParams<T>&, Mode, BatchNormCache<T>*);     \
    template BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>&, const BatchNormCache<T>&,                \
                                                   const BasicTensor<T>&);                                         \
    template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> sigmoid_backward(const BasicTensor<T>&, const BasicTensor<T>&);                       \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                          \
    template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                          \
    template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*);          \
    template LinearGrads<T> linear_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
    template LossAndGrad<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>);

DA2_INSTANTIATE_OPS(float)
DA2_INSTANTIATE_OPS(double)

}  // namespace da2

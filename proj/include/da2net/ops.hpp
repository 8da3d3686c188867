#pragma once

#include <optional>
#include <vector>

#include "da2net/tensor.hpp"

namespace da2 {

enum class Mode { Train, Eval };

struct ConvGeometry {
    int groups = 1;
    int stride = 1;
    int padding = 0;
};

template <typename T>
struct Conv2dParams {
    BasicTensor<T> weight;  // (C_out, C_in/groups, n, n)
    std::optional<BasicTensor<T>> bias;  // (C_out)
    ConvGeometry geometry;
};

template <typename T>
struct BatchNormParams {
    BasicTensor<T> gamma, beta;
    BasicTensor<T> running_mean, running_var;
    double momentum = 0.1;
    double epsilon = 1e-5;

    static BatchNormParams identity(std::int64_t channels);
};

// Grouped 2-D cross-correlation.

/// Output extent for one spatial axis; throws ShapeError if not positive.
std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, int stride, int padding);

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias,
                              ConvGeometry geom);

template <typename T>
struct Conv2dGrads {
    BasicTensor<T> dx, dweight, dbias;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight, bool has_bias,
                               ConvGeometry geom, const BasicTensor<T>& grad_out, bool need_dx = true);

template <typename T>
BasicTensor<T> conv2d_grouped(const BasicTensor<T>& x, const Conv2dParams<T>& p) {
    return conv2d_forward(x, p.weight, p.bias ? &*p.bias : nullptr, p.geometry);
}

// Cross-channel 1-D convolution over a (N,C) descriptor with one shared kernel
// of odd length alpha and zero padding (alpha-1)/2 at the channel boundaries.

template <typename T>
BasicTensor<T> conv1d_channel(const BasicTensor<T>& d, const BasicTensor<T>& kernel, T bias = T(0));

template <typename T>
struct Conv1dGrads {
    BasicTensor<T> dd, dkernel;
    T dbias;
};

template <typename T>
Conv1dGrads<T> conv1d_channel_backward(const BasicTensor<T>& d, const BasicTensor<T>& kernel,
                                       const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& x_shape, const BasicTensor<T>& grad_out);

template <typename T>
struct BatchNormCache {
    BasicTensor<T> xhat;
    std::vector<T> inv_std;
    Mode mode = Mode::Eval;
};

/// Train mode normalizes with batch statistics and updates the running
/// averages in `p`; eval mode uses the running statistics.
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, BatchNormParams<T>& p, Mode mode,
                          BatchNormCache<T>* cache = nullptr);

template <typename T>
struct BatchNormGrads {
    BasicTensor<T> dx, dgamma, dbeta;
};

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>& gamma, const BatchNormCache<T>& cache,
                                      const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

/// Takes the forward output y = sigmoid(x).
template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& y, const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out);

/// y = x W^T + b with x (N,in), W (out,in), b (out).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias);

template <typename T>
struct LinearGrads {
    BasicTensor<T> dx, dweight, dbias;
};

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                               const BasicTensor<T>& grad_out);

template <typename T>
struct LossAndGrad {
    double loss;
    BasicTensor<T> grad;  // d loss / d logits
};

/// Mean softmax cross-entropy over the batch, log-sum-exp stabilized.
template <typename T>
LossAndGrad<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

}  // namespace da2

#include "da2net/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace da2 {

double Rng::normal(double mean, double stddev) noexcept {
    // Box-Muller, one value per call so the draw count is fixed per sample.
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (auto e : shape) {
        if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape));
    }
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(static_cast<std::size_t>(numel(shape_)), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    check_shape(shape_);
    const auto expected = numel(shape_);
    if (static_cast<std::int64_t>(data_.size()) != expected) {
        throw ShapeError("expected " + std::to_string(expected) + " values, got " + std::to_string(data_.size()));
    }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::normal(Shape shape, Rng& rng, double mean, double stddev) {
    BasicTensor<T> out(std::move(shape));
    for (auto& v : out.data_) v = static_cast<T>(rng.normal(mean, stddev));
    return out;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const& {
    BasicTensor copy = *this;
    return std::move(copy).reshaped(std::move(shape));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) && {
    check_shape(shape);
    if (numel(shape) != numel(shape_)) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
    return std::move(*this);
}

template <typename T>
BasicTensor<T> scale_broadcast(const BasicTensor<T>& x, const BasicTensor<T>& w) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("scale_broadcast expects rank-4 tensors");
    const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (w.dim(1) != C) {
        throw ShapeError("broadcast channel mismatch: input has " + std::to_string(C) + " channels, weights have " +
                         std::to_string(w.dim(1)));
    }
    if (w.dim(2) != 1 || w.dim(3) != 1) throw ShapeError("broadcast weights must have unit spatial extents");
    if (w.dim(0) != 1 && w.dim(0) != N) {
        throw ShapeError("broadcast batch mismatch: input has " + std::to_string(N) + ", weights have " +
                         std::to_string(w.dim(0)));
    }
    BasicTensor<T> out(x.shape());
    const bool per_sample = w.dim(0) == N;
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            const T s = w[static_cast<std::size_t>((per_sample ? n : 0) * C + c)];
            const T* src = x.ptr() + (n * C + c) * HW;
            T* dst = out.ptr() + (n * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) dst[i] = src[i] * s;
        }
    }
    return out;
}

Tensor64 finite_difference_gradient(const std::function<double(const Tensor64&)>& f, const Tensor64& x, double eps) {
    if (!(eps > 0.0)) throw OracleError("finite difference step must be positive");
    Tensor64 grad(x.shape());
    Tensor64 probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(probe);
        probe[i] = orig - eps;
        const double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw OracleError("non-finite function value while probing index " + std::to_string(i));
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    return grad;
}

template <typename T>
double max_relative_error(const BasicTensor<T>& analytic, const BasicTensor<T>& numeric) {
    if (analytic.shape() != numeric.shape()) {
        throw ShapeError("gradient shape mismatch " + shape_str(analytic.shape()) + " vs " +
                         shape_str(numeric.shape()));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i];
        const double err = std::abs(a - static_cast<double>(numeric[i])) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template Tensor scale_broadcast(const Tensor&, const Tensor&);
template Tensor64 scale_broadcast(const Tensor64&, const Tensor64&);
template double max_relative_error(const Tensor&, const Tensor&);
template double max_relative_error(const Tensor64&, const Tensor64&);

}  // namespace da2

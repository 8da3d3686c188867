#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "da2net/error.hpp"
#include "da2net/rng.hpp"

namespace da2 {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
void check_shape(const Shape& shape);

/// Cache-line aligned storage. Vectorized reductions peel a scalar head whose
/// length depends on the buffer address; a fixed base alignment makes the
/// summation order, and so the rounding, independent of where a buffer lands.
inline constexpr std::size_t kStorageAlignment = 64;

template <typename T>
struct AlignedAllocator {
    using value_type = T;
    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kStorageAlignment}));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kStorageAlignment}); }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array. Activations are NCHW.
///
/// Value type: copies are deep, moves are cheap. f32 is the production path,
/// f64 is used for finite-difference gradient checks.
template <typename T>
class BasicTensor {
   public:
    using value_type = T;

    BasicTensor() = default;
    explicit BasicTensor(Shape shape, T fill = T(0));
    BasicTensor(Shape shape, std::vector<T> values);

    static BasicTensor normal(Shape shape, Rng& rng, double mean, double stddev);

    const Shape& shape() const noexcept { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T* ptr() noexcept { return data_.data(); }
    const T* ptr() const noexcept { return data_.data(); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Flat index of [n,c,h,w] in a rank-4 tensor.
    std::size_t offset(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const noexcept {
        return static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w);
    }
    T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) noexcept { return data_[offset(n, c, h, w)]; }
    const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const noexcept {
        return data_[offset(n, c, h, w)];
    }

    /// Same data, different extents. Element count must match.
    BasicTensor reshaped(Shape shape) const&;
    BasicTensor reshaped(Shape shape) &&;

    template <typename U>
    BasicTensor<U> cast() const {
        BasicTensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    bool operator==(const BasicTensor& other) const = default;

   private:
    Shape shape_;
    AlignedVector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// out[n,c,h,w] = x[n,c,h,w] * w[n or 0, c, 0, 0]
template <typename T>
BasicTensor<T> scale_broadcast(const BasicTensor<T>& x, const BasicTensor<T>& w);

/// Central-difference gradient of a scalar function.
///
/// Throws OracleError if f is non-finite at any probe point.
Tensor64 finite_difference_gradient(const std::function<double(const Tensor64&)>& f, const Tensor64& x,
                                    double eps = 1e-5);

/// max_i |a_i - b_i| / max(1, |a_i|)
template <typename T>
double max_relative_error(const BasicTensor<T>& analytic, const BasicTensor<T>& numeric);

}  // namespace da2

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace mmld {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Raised when a primitive produces NaN/Inf; non-finite values are never
// propagated silently.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    os << ']';
    return os.str();
}

// Heap storage aligned for the widest SIMD width, so kernels see the same
// alignment (and therefore the same reduction order) on every run.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

// Dense row-major tensor. Shapes never contain zero-sized dimensions.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(numel(shape_), fill) {
        check_dims();
    }

    Tensor(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (data_.size() != numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             to_string(shape_));
    }

    Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        check_dims();
        if (data_.size() != numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             to_string(shape_));
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* raw() { return data_.data(); }
    const T* raw() const { return data_.data(); }
    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    AlignedVector<T>& vec() { return data_; }
    const AlignedVector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape s) const& {
        if (numel(s) != data_.size()) throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
        return Tensor(std::move(s), data_);
    }
    Tensor reshaped(Shape s) && {
        if (numel(s) != data_.size()) throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
        shape_ = std::move(s);
        return std::move(*this);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    Tensor<U> cast() const {
        AlignedVector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    void check_dims() const {
        for (auto d : shape_)
            if (d == 0) throw ShapeError("zero-sized dimension in shape " + to_string(shape_));
    }

    Shape shape_;
    AlignedVector<T> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace mmld

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdft {

// ----------------------------- errors -----------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
/// Tensor dimensions do not line up for the requested primitive.
struct ShapeError : Error {
    using Error::Error;
};
/// Bad input values (label out of range, token id out of vocabulary, malformed rows).
struct InputError : Error {
    using Error::Error;
};
/// API misuse, e.g. calling backward on a non-scalar.
struct UsageError : Error {
    using Error::Error;
};
/// Invalid configuration fields.
struct ConfigError : Error {
    using Error::Error;
};
/// Two collections that must share a name set do not.
struct ContractError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
/// Training produced a non-finite loss.
struct DivergenceError : Error {
    using Error::Error;
};

// ----------------------------- shapes -----------------------------

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ----------------------------- tensor -----------------------------

/// Dense row-major tensor. Rank 0 is a scalar, rank 2 is the workhorse.
template <typename Real>
class Tensor {
   public:
    using value_type = Real;

    Tensor() : shape_{}, data_(1, Real(0)) {}

    explicit Tensor(Shape shape, Real fill = Real(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
        }
    }

    static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }

    static Tensor matrix(std::size_t rows, std::size_t cols, Real fill = Real(0)) {
        return Tensor(Shape{rows, cols}, fill);
    }

    /// Builds a matrix from nested braces: `Tensor<double>::from_rows({{1, 2}, {3, 4}})`.
    static Tensor from_rows(std::initializer_list<std::initializer_list<Real>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<Real> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged rows in Tensor::from_rows");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor(Shape{r, c}, std::move(data));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }

    std::size_t rows() const {
        require_rank2();
        return shape_[0];
    }
    std::size_t cols() const {
        require_rank2();
        return shape_[1];
    }

    Real& operator[](std::size_t i) { return data_[i]; }
    const Real& operator[](std::size_t i) const { return data_[i]; }

    Real& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const Real& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    Real item() const {
        if (data_.size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Real* data() noexcept { return data_.data(); }
    const Real* data() const noexcept { return data_.data(); }
    std::span<Real> values() noexcept { return data_; }
    std::span<const Real> values() const noexcept { return data_; }
    std::vector<Real>& storage() noexcept { return data_; }
    const std::vector<Real>& storage() const noexcept { return data_; }

    void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
    }

    bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

   private:
    void require_rank2() const {
        if (shape_.size() != 2) throw ShapeError("expected a matrix, got shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<Real> data_;
};

// in-place helpers shared by the optimizer and averaging code

template <typename Real>
void axpy(Real alpha, const Tensor<Real>& x, Tensor<Real>& y) {
    if (!x.same_shape(y)) throw ShapeError("axpy: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    const Real* xs = x.data();
    Real* ys = y.data();
    for (std::size_t i = 0, n = y.size(); i < n; ++i) ys[i] += alpha * xs[i];
}

template <typename Real>
void scale_inplace(Tensor<Real>& x, Real alpha) {
    for (auto& v : x.storage()) v *= alpha;
}

template <typename Real>
Real max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Real m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Per-row argmax with ties broken toward the lowest index.
template <typename Real>
std::vector<int> argmax_rows(const Tensor<Real>& t) {
    std::vector<int> out(t.rows());
    for (std::size_t r = 0; r < t.rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < t.cols(); ++c) {
            if (t(r, c) > t(r, best)) best = c;
        }
        out[r] = static_cast<int>(best);
    }
    return out;
}

}  // namespace sdft

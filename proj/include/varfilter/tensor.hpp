#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "varfilter/errors.hpp"

namespace varfilter {

/// Dense real array in row-major order, 64-bit throughout.
///
/// Rank 0 (scalar), 1 (vector) and 2 (matrix) are the shapes the library
/// actually uses; higher ranks are representable but no op produces them.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> values)
        : shape_(std::move(shape)), data_(std::move(values)) {
        if (data_.size() != count(shape_)) {
            throw ShapeError("Tensor: " + std::to_string(data_.size()) +
                             " values for shape " + shape_string(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    static Tensor vector(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Tensor({rows, cols}, std::move(values));
    }

    static Tensor zeros(const std::vector<std::size_t>& shape) { return Tensor(shape); }

    static Tensor full(const std::vector<std::size_t>& shape, double v) {
        Tensor t(shape);
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    bool is_scalar() const { return shape_.empty(); }
    bool is_vector() const { return shape_.size() == 1; }
    bool is_matrix() const { return shape_.size() == 2; }

    std::size_t rows() const {
        require(is_matrix(), "rows() on non-matrix");
        return shape_[0];
    }
    std::size_t cols() const {
        require(is_matrix(), "cols() on non-matrix");
        return shape_[1];
    }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    double scalar_value() const {
        require(size() == 1, "scalar_value() on tensor with " + std::to_string(size()) +
                                 " elements");
        return data_[0];
    }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    /// Elementwise in-place accumulation; the core of gradient accumulation.
    void add_(const Tensor& other) {
        if (!same_shape(other)) {
            throw ShapeError("Tensor::add_: shape " + shape_string(other.shape_) +
                             " into " + shape_string(shape_));
        }
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    }

    void scale_(double s) {
        for (double& v : data_) v *= s;
    }

    static std::string shape_string(const std::vector<std::size_t>& shape) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << "x";
            os << shape[i];
        }
        os << "]";
        return os.str();
    }

    std::string shape_string() const { return shape_string(shape_); }

private:
    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t s : shape) {
            if (s == 0) throw ShapeError("Tensor: zero extent in shape " + shape_string(shape));
            n *= s;
        }
        return n;
    }

    static void require(bool ok, const std::string& msg) {
        if (!ok) throw ShapeError("Tensor: " + msg);
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

}  // namespace varfilter

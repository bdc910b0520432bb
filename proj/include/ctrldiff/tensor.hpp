#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ctrldiff/common.hpp"
#include "ctrldiff/rng.hpp"

namespace ctrldiff {

// Dense row-major tensor. Feature maps use the (batch, channel, height, width)
// axis order throughout.
template <typename Real>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), Real(0));
    }

    static Tensor full(std::vector<int64_t> shape, Real v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor ones(std::vector<int64_t> shape) { return full(std::move(shape), Real(1)); }

    static Tensor randn(std::vector<int64_t> shape, Rng& rng, Real stddev = Real(1)) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = static_cast<Real>(rng.normal()) * stddev;
        return t;
    }

    static int64_t count(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            check(d > 0, "tensor axis must be positive, got " + std::to_string(d));
            n *= d;
        }
        return n;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t ndim() const { return shape_.size(); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    Real* data() { return data_.data(); }
    const Real* data() const { return data_.data(); }
    Real& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const Real& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 4-axis accessor for feature maps
    Real& at(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    const Real& at(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(Real v) {
        for (auto& x : data_) x = v;
    }

    bool all_finite() const {
        for (const auto& x : data_) {
            if (!std::isfinite(static_cast<double>(x))) return false;
        }
        return true;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ", ";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

    template <typename Other>
    Tensor<Other> cast() const {
        Tensor<Other> t(shape_);
        for (int64_t i = 0; i < numel(); ++i) t[i] = static_cast<Other>(data_[static_cast<size_t>(i)]);
        return t;
    }

private:
    std::vector<int64_t> shape_;
    std::vector<Real> data_;
};

template <typename Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const std::string& where) {
    check(a.same_shape(b), where + ": shape mismatch, " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace ctrldiff

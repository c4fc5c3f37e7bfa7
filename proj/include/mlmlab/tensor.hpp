#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mlmlab/errors.hpp"

namespace mlmlab {

// Dense row-major tensor of 64-bit floats. Values are owned; shape is a list
// of extents whose product always equals v.size().
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> v;

    Tensor() = default;
    Tensor(std::vector<int64_t> s, std::vector<double> data)
        : shape(std::move(s)), v(std::move(data)) {
        require(numel(shape) == static_cast<int64_t>(v.size()),
                "Tensor: shape/value size mismatch");
    }

    static int64_t numel(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t e : s) {
            require(e >= 0, "Tensor: negative extent");
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) {
        int64_t n = numel(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
    }

    static Tensor full(std::vector<int64_t> s, double value) {
        int64_t n = numel(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), value));
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    int64_t size() const { return static_cast<int64_t>(v.size()); }
    int64_t ndim() const { return static_cast<int64_t>(shape.size()); }

    // 2-D accessors; rank is validated by callers that require matrices.
    int64_t rows() const { return shape.at(0); }
    int64_t cols() const { return shape.at(1); }
    double& at(int64_t i, int64_t j) { return v[static_cast<size_t>(i * cols() + j)]; }
    double at(int64_t i, int64_t j) const { return v[static_cast<size_t>(i * cols() + j)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double item() const {
        require(size() == 1, "Tensor::item: not a scalar");
        return v[0];
    }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::fabs(a.v[i] - b.v[i]));
    return m;
}

inline double dot(const Tensor& a, const Tensor& b) {
    require(a.size() == b.size(), "dot: size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) s += a.v[i] * b.v[i];
    return s;
}

inline double squared_norm(const Tensor& a) { return dot(a, a); }

}  // namespace mlmlab

#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hk {

// Dense row-major tensor of doubles. Rank 1 (vectors/scalars) and rank 2
// (matrices) are the only shapes the ops work with; a scalar is shape {1}.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (numel() != data.size())
            throw std::invalid_argument("tensor: shape/data size mismatch");
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor zeros(std::vector<std::size_t> s) {
        std::size_t n = 1;
        for (auto d : s) n *= d;
        return Tensor(std::move(s), std::vector<double>(n, 0.0));
    }
    static Tensor full(std::vector<std::size_t> s, double v) {
        std::size_t n = 1;
        for (auto d : s) n *= d;
        return Tensor(std::move(s), std::vector<double>(n, v));
    }
    static Tensor vector(std::vector<double> d) {
        std::size_t n = d.size();
        return Tensor({n}, std::move(d));
    }
    static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> d) {
        return Tensor({r, c}, std::move(d));
    }

    std::size_t rank() const { return shape.size(); }
    std::size_t numel() const {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }
    std::size_t rows() const { return shape.at(0); }
    std::size_t cols() const { return rank() == 2 ? shape[1] : 1; }
    std::size_t len() const { return numel(); }

    double& at(std::size_t i) { return data[i]; }
    double at(std::size_t i) const { return data[i]; }
    double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

    double value() const {
        if (numel() != 1) throw std::invalid_argument("tensor: not a scalar");
        return data[0];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::span<const double> row_span(std::size_t i) const {
        return std::span<const double>(data.data() + i * cols(), cols());
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

inline std::string shape_str(const Tensor& t) {
    std::string s = "(";
    for (std::size_t i = 0; i < t.shape.size(); ++i)
        s += std::to_string(t.shape[i]) + (i + 1 < t.shape.size() ? "," : "");
    return s + ")";
}

inline void check_finite(const Tensor& t, const char* where) {
    if (!t.finite())
        throw std::runtime_error(std::string("non-finite value in ") + where);
}

inline double sqdist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        double d = a[k] - b[k];
        s += d * d;
    }
    return s;
}

}  // namespace hk

#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "hk/tensor.hpp"

namespace hk {

// Eigenvalues of a symmetric matrix by the cyclic Jacobi method.
// Intended for the small (n <= 64) matrices that show up in PSD checks
// and singular-value oracles.
inline std::vector<double> symmetric_eigenvalues(const Tensor& A, int sweeps = 64) {
    if (A.rank() != 2 || A.rows() != A.cols())
        throw std::invalid_argument("symmetric_eigenvalues: square matrix required");
    std::size_t n = A.rows();
    std::vector<double> m(A.data);
    auto at = [&](std::size_t i, std::size_t j) -> double& { return m[i * n + j]; };

    for (int sweep = 0; sweep < sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
        if (off < 1e-26) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double apq = at(p, q);
                if (std::fabs(apq) < 1e-300) continue;
                double app = at(p, p), aqq = at(q, q);
                double theta = 0.5 * (aqq - app) / apq;
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = at(i, i);
    std::sort(eig.begin(), eig.end());
    return eig;
}

inline double min_eigenvalue(const Tensor& A) { return symmetric_eigenvalues(A).front(); }

// Singular values via eigenvalues of W^T W (oracle-grade, small matrices).
inline std::vector<double> singular_values(const Tensor& W) {
    std::size_t r = W.rows(), c = W.cols();
    Tensor G = Tensor::zeros({c, c});
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < r; ++k) s += W.at(k, i) * W.at(k, j);
            G.at(i, j) = s;
        }
    auto eig = symmetric_eigenvalues(G);
    std::vector<double> sv(eig.size());
    for (std::size_t i = 0; i < eig.size(); ++i)
        sv[i] = std::sqrt(std::max(0.0, eig[eig.size() - 1 - i]));
    return sv;  // descending
}

// Least-squares slope of y against x.
inline double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("fit_slope: need >= 2 points");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= double(x.size());
    my /= double(x.size());
    double num = 0, den = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num += (x[i] - mx) * (y[i] - my);
        den += (x[i] - mx) * (x[i] - mx);
    }
    if (den == 0) throw std::invalid_argument("fit_slope: degenerate abscissae");
    return num / den;
}

}  // namespace hk

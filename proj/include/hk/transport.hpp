#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "hk/autodiff.hpp"
#include "hk/tensor.hpp"

namespace hk::transport {

using autodiff::Tape;
using autodiff::Var;

// Simplex-constrained weights over a finite support.
struct DiscreteMeasure {
    std::vector<double> w;

    static DiscreteMeasure uniform(std::size_t n) {
        if (n < 1) throw std::invalid_argument("uniform measure: n >= 1");
        return DiscreteMeasure{std::vector<double>(n, 1.0 / double(n))};
    }

    std::size_t size() const { return w.size(); }

    void validate(double tol = 1e-10) const {
        double s = 0.0;
        for (double v : w) {
            if (v < 0.0) throw std::invalid_argument("measure: negative weight");
            s += v;
        }
        if (std::fabs(s - 1.0) > tol)
            throw std::invalid_argument("measure: weights must sum to 1");
    }
};

// squared-Euclidean cost between two point sets
inline Tensor cost_matrix(const Tensor& X, const Tensor& Y) {
    if (X.numel() == 0 || Y.numel() == 0)
        throw std::invalid_argument("cost_matrix: empty point set");
    if (X.cols() != Y.cols()) throw std::invalid_argument("cost_matrix: dim mismatch");
    std::size_t n = X.rows(), m = Y.rows();
    Tensor C = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) C.at(i, j) = sqdist(X.row_span(i), Y.row_span(j));
    return C;
}

inline double matrix_mean(const Tensor& C) {
    double s = 0.0;
    for (double v : C.data) s += v;
    return s / double(C.numel());
}

struct SinkhornResult {
    double distance = 0.0;
    Tensor plan;
    double marginal_residual = 0.0;  // max of the two L1 marginal violations
    int iterations = 0;
    bool converged = false;
    std::vector<double> residual_trace;  // residual after each full iteration
};

namespace detail {
inline double lse(const std::vector<double>& v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
}
}  // namespace detail

// Entropic OT by log-domain Sinkhorn iterations. Runs until the worst L1
// marginal violation drops below tol or max_iter is hit; the result is
// returned either way with the achieved residual.
inline SinkhornResult sinkhorn(const DiscreteMeasure& a, const DiscreteMeasure& b,
                               const Tensor& C, double eps_reg, int max_iter = 1000,
                               double tol = 1e-9, bool record_trace = false) {
    if (eps_reg <= 0.0) throw std::invalid_argument("sinkhorn: eps_reg > 0 required");
    a.validate(1e-8);
    b.validate(1e-8);
    std::size_t n = a.size(), m = b.size();
    if (C.rank() != 2 || C.rows() != n || C.cols() != m)
        throw std::invalid_argument("sinkhorn: cost shape mismatch");

    std::vector<double> loga(n), logb(m), f(n, 0.0), g(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) loga[i] = std::log(std::max(a.w[i], 1e-300));
    for (std::size_t j = 0; j < m; ++j) logb[j] = std::log(std::max(b.w[j], 1e-300));

    SinkhornResult out;
    std::vector<double> buf(std::max(n, m));
    auto plan_entry = [&](std::size_t i, std::size_t j) {
        return std::exp((f[i] + g[j] - C.at(i, j)) / eps_reg);
    };
    auto residual = [&]() {
        double rrow = 0.0, rcol = 0.0;
        std::vector<double> colsum(m, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double rs = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                double p = plan_entry(i, j);
                rs += p;
                colsum[j] += p;
            }
            rrow += std::fabs(rs - a.w[i]);
        }
        for (std::size_t j = 0; j < m; ++j) rcol += std::fabs(colsum[j] - b.w[j]);
        return std::max(rrow, rcol);
    };

    int it = 0;
    for (; it < max_iter; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            buf.resize(m);
            for (std::size_t j = 0; j < m; ++j) buf[j] = (g[j] - C.at(i, j)) / eps_reg;
            f[i] = eps_reg * (loga[i] - detail::lse(buf));
        }
        for (std::size_t j = 0; j < m; ++j) {
            buf.resize(n);
            for (std::size_t i = 0; i < n; ++i) buf[i] = (f[i] - C.at(i, j)) / eps_reg;
            g[j] = eps_reg * (logb[j] - detail::lse(buf));
        }
        double res = residual();
        if (record_trace) out.residual_trace.push_back(res);
        if (res < tol) {
            out.converged = true;
            ++it;
            break;
        }
    }

    out.iterations = it;
    out.plan = Tensor::zeros({n, m});
    double dist = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double p = plan_entry(i, j);
            out.plan.at(i, j) = p;
            dist += p * C.at(i, j);
        }
    out.distance = dist;
    out.marginal_residual = residual();
    if (!std::isfinite(dist)) throw std::runtime_error("sinkhorn: non-finite distance");
    return out;
}

struct SinkhornVar {
    Var distance;
    Var plan;
    double marginal_residual = 0.0;
};

// Fixed-count unrolled Sinkhorn on the tape; gradients flow to the weight
// vectors (through their logs) and to the cost matrix if it is a variable.
// Weights must be strictly positive.
inline SinkhornVar sinkhorn_unrolled(Tape& tape, Var a, Var b, Var C, double eps_reg,
                                     int iters) {
    using namespace autodiff;
    if (eps_reg <= 0.0) throw std::invalid_argument("sinkhorn_unrolled: eps_reg > 0");
    if (iters < 1) throw std::invalid_argument("sinkhorn_unrolled: iters >= 1");
    const Tensor& Cv = tape.value(C);
    std::size_t n = Cv.rows(), m = Cv.cols();

    Var loga = mul_scalar(log(a), eps_reg);
    Var logb = mul_scalar(log(b), eps_reg);
    Var negC = neg(C);
    Var f = tape.constant(Tensor::zeros({n}));
    Var g = tape.constant(Tensor::zeros({m}));
    for (int it = 0; it < iters; ++it) {
        // f_i = eps (log a_i - LSE_j((g_j - C_ij)/eps))
        Var M1 = mul_scalar(add_rowvec(negC, g), 1.0 / eps_reg);  // n x m
        f = sub(loga, mul_scalar(logsumexp_rows(M1), eps_reg));
        Var M2 = mul_scalar(add_colvec(negC, f), 1.0 / eps_reg);
        g = sub(logb, mul_scalar(logsumexp_cols(M2), eps_reg));
    }
    Var logP = mul_scalar(add_colvec(add_rowvec(negC, g), f), 1.0 / eps_reg);
    Var P = exp(logP);
    SinkhornVar out;
    out.plan = P;
    out.distance = sum(mul(P, C));

    const Tensor& Pv = tape.value(P);
    const Tensor &av = tape.value(a), &bv = tape.value(b);
    double rrow = 0.0, rcol = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double rs = 0.0;
        for (std::size_t j = 0; j < m; ++j) rs += Pv.at(i, j);
        rrow += std::fabs(rs - av.data[i]);
    }
    for (std::size_t j = 0; j < m; ++j) {
        double cs = 0.0;
        for (std::size_t i = 0; i < n; ++i) cs += Pv.at(i, j);
        rcol += std::fabs(cs - bv.data[j]);
    }
    out.marginal_residual = std::max(rrow, rcol);
    return out;
}

// ---- exact small-instance oracle ----

namespace detail {

// exact optimal assignment for equal-size uniform measures (n <= 8)
inline double assignment_cost(const Tensor& C) {
    std::size_t n = C.rows();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += C.at(i, perm[i]);
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best / double(n);
}

// transportation simplex with Bland's entering rule
inline double transport_simplex(const std::vector<double>& a, const std::vector<double>& b,
                                const Tensor& C) {
    std::size_t n = a.size(), m = b.size();
    std::vector<std::vector<double>> x(n, std::vector<double>(m, 0.0));
    std::vector<std::vector<char>> basis(n, std::vector<char>(m, 0));

    // northwest-corner start; keep degenerate cells in the basis so the
    // spanning tree always has n + m - 1 edges
    {
        std::vector<double> ra = a, rb = b;
        std::size_t i = 0, j = 0;
        while (i < n && j < m) {
            double q = std::min(ra[i], rb[j]);
            x[i][j] = q;
            basis[i][j] = 1;
            ra[i] -= q;
            rb[j] -= q;
            bool row_done = ra[i] <= 1e-15, col_done = rb[j] <= 1e-15;
            if (row_done && col_done) {
                if (i + 1 < n && j + 1 < m) basis[i + 1][j] = 1;  // degenerate link
                ++i;
                ++j;
            } else if (row_done) {
                ++i;
            } else {
                ++j;
            }
        }
    }

    double maxc = 0.0;
    for (double v : C.data) maxc = std::max(maxc, std::fabs(v));
    double tol = 1e-12 * (1.0 + maxc);

    for (int pivot = 0; pivot < 100000; ++pivot) {
        // potentials from the basis tree
        std::vector<double> u(n, 0.0), v(m, 0.0);
        std::vector<char> us(n, 0), vs(m, 0);
        us[0] = 1;
        bool progress = true;
        while (progress) {
            progress = false;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                    if (!basis[i][j]) continue;
                    if (us[i] && !vs[j]) {
                        v[j] = C.at(i, j) - u[i];
                        vs[j] = 1;
                        progress = true;
                    } else if (!us[i] && vs[j]) {
                        u[i] = C.at(i, j) - v[j];
                        us[i] = 1;
                        progress = true;
                    }
                }
        }

        // entering cell: Bland (first negative reduced cost)
        std::size_t ei = n, ej = m;
        for (std::size_t i = 0; i < n && ei == n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                if (!basis[i][j] && C.at(i, j) - u[i] - v[j] < -tol) {
                    ei = i;
                    ej = j;
                    break;
                }
        if (ei == n) break;  // optimal

        // unique cycle: path from row ei to col ej through the basis tree
        // nodes: rows 0..n-1, cols n..n+m-1
        std::vector<int> parent(n + m, -1);
        std::vector<char> seen(n + m, 0);
        std::vector<std::size_t> stack = {ei};
        seen[ei] = 1;
        while (!stack.empty()) {
            std::size_t nd = stack.back();
            stack.pop_back();
            if (nd < n) {
                for (std::size_t j = 0; j < m; ++j)
                    if (basis[nd][j] && !seen[n + j]) {
                        seen[n + j] = 1;
                        parent[n + j] = int(nd);
                        stack.push_back(n + j);
                    }
            } else {
                std::size_t j = nd - n;
                for (std::size_t i = 0; i < n; ++i)
                    if (basis[i][j] && !seen[i]) {
                        seen[i] = 1;
                        parent[i] = int(nd);
                        stack.push_back(i);
                    }
            }
        }
        if (!seen[n + ej]) throw std::runtime_error("exact_ot_small: basis not spanning");

        // cycle cells alternate +/- starting with + at the entering cell
        std::vector<std::pair<std::size_t, std::size_t>> cyc;
        cyc.emplace_back(ei, ej);
        std::size_t cur = n + ej;
        while (cur != ei) {
            std::size_t par = std::size_t(parent[cur]);
            if (cur >= n)
                cyc.emplace_back(par, cur - n);
            else
                cyc.emplace_back(cur, par - n);
            cur = par;
        }

        double theta = std::numeric_limits<double>::infinity();
        std::size_t li = 0, lj = 0;
        bool found = false;
        for (std::size_t k = 1; k < cyc.size(); k += 2) {
            auto [i, j] = cyc[k];
            if (x[i][j] < theta - 1e-18) {
                theta = x[i][j];
                li = i;
                lj = j;
                found = true;
            }
        }
        if (!found) throw std::runtime_error("exact_ot_small: unbounded pivot");
        for (std::size_t k = 0; k < cyc.size(); ++k) {
            auto [i, j] = cyc[k];
            x[i][j] += (k % 2 == 0) ? theta : -theta;
        }
        x[li][lj] = 0.0;
        basis[li][lj] = 0;
        basis[ei][ej] = 1;
    }

    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) cost += x[i][j] * C.at(i, j);
    return cost;
}

}  // namespace detail

// Ground-truth optimal transport cost for tiny instances: permutation
// enumeration when both measures are uniform and equal-sized, otherwise the
// transportation simplex.
inline double exact_ot_small(const DiscreteMeasure& a, const DiscreteMeasure& b,
                             const Tensor& C) {
    std::size_t n = a.size(), m = b.size();
    if (n > 8 || m > 8) throw std::invalid_argument("exact_ot_small: instance too large");
    a.validate(1e-8);
    b.validate(1e-8);
    if (C.rows() != n || C.cols() != m)
        throw std::invalid_argument("exact_ot_small: cost shape mismatch");

    bool uniform_equal = (n == m);
    for (std::size_t i = 0; i < n && uniform_equal; ++i)
        uniform_equal = std::fabs(a.w[i] - 1.0 / double(n)) < 1e-12;
    for (std::size_t j = 0; j < m && uniform_equal; ++j)
        uniform_equal = std::fabs(b.w[j] - 1.0 / double(m)) < 1e-12;
    if (uniform_equal) return detail::assignment_cost(C);
    return detail::transport_simplex(a.w, b.w, C);
}

}  // namespace hk::transport

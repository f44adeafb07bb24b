#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hk/autodiff.hpp"
#include "hk/hklearn.hpp"
#include "hk/kernels.hpp"
#include "hk/rng.hpp"
#include "hk/tensor.hpp"

namespace hk::svgd {

using autodiff::Tape;
using autodiff::Var;
using kernels::DeepRbfKernel;

struct ParticleSet {
    Tensor X;  // n x d
    long iteration = 0;

    std::size_t count() const { return X.rows(); }
    std::size_t dim() const { return X.cols(); }

    void validate() const {
        if (X.rows() < 1) throw std::invalid_argument("ParticleSet: n >= 1");
        check_finite(X, "ParticleSet");
    }
};

struct TargetDensity {
    std::function<double(std::span<const double>)> log_density;
    std::function<std::vector<double>(std::span<const double>)> grad_log_density;
};

inline TargetDensity gaussian_target(std::vector<double> mean, double variance) {
    if (variance <= 0.0) throw std::invalid_argument("gaussian_target: variance > 0");
    auto mu = std::make_shared<std::vector<double>>(std::move(mean));
    TargetDensity t;
    t.log_density = [mu, variance](std::span<const double> x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            double d = x[i] - (*mu)[i];
            s += d * d;
        }
        return -0.5 * s / variance;
    };
    t.grad_log_density = [mu, variance](std::span<const double> x) {
        std::vector<double> g(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) g[i] = -(x[i] - (*mu)[i]) / variance;
        return g;
    };
    return t;
}

// Kernel interface for the particle update: the Gram over the particle set
// plus the aggregated repulsion R_i = sum_j W_ij grad_{x_j} k(x_j, x_i).
struct KernelOps {
    std::function<Tensor(const Tensor&)> gram;
    std::function<Tensor(const Tensor&, const Tensor&)> weighted_repulsion;
};

// ---- RBF kernel with the median heuristic ----

struct RbfMedianKernel {
    double bandwidth2 = 1.0;

    double eval(std::span<const double> a, std::span<const double> b) const {
        return std::exp(-sqdist(a, b) / bandwidth2);
    }
};

inline RbfMedianKernel rbf_median_kernel(const Tensor& particles,
                                         double bandwidth_floor = 1e-6) {
    std::size_t n = particles.rows();
    if (n < 2) throw std::invalid_argument("rbf_median_kernel: n >= 2 required");
    std::vector<double> d2;
    d2.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            d2.push_back(sqdist(particles.row_span(i), particles.row_span(j)));
    std::size_t mid = d2.size() / 2;
    std::nth_element(d2.begin(), d2.begin() + mid, d2.end());
    double med = d2[mid];
    RbfMedianKernel k;
    k.bandwidth2 = std::max(med / std::log(double(n) + 1.0), bandwidth_floor);
    return k;
}

inline KernelOps fixed_rbf_ops(double bandwidth2) {
    KernelOps ops;
    ops.gram = [bandwidth2](const Tensor& P) {
        std::size_t n = P.rows();
        Tensor G = Tensor::zeros({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                G.at(i, j) = std::exp(-sqdist(P.row_span(i), P.row_span(j)) / bandwidth2);
        return G;
    };
    ops.weighted_repulsion = [bandwidth2](const Tensor& P, const Tensor& W) {
        std::size_t n = P.rows(), d = P.cols();
        Tensor R = Tensor::zeros({n, d});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double k = std::exp(-sqdist(P.row_span(j), P.row_span(i)) / bandwidth2);
                double c = W.at(j, i) * k * (-2.0 / bandwidth2);
                for (std::size_t q = 0; q < d; ++q)
                    R.at(i, q) += c * (P.at(j, q) - P.at(i, q));
            }
        return R;
    };
    return ops;
}

// median bandwidth recomputed from the current particles on every call
inline KernelOps rbf_median_ops(double bandwidth_floor = 1e-6) {
    KernelOps ops;
    ops.gram = [bandwidth_floor](const Tensor& P) {
        double bw2 =
            P.rows() >= 2 ? rbf_median_kernel(P, bandwidth_floor).bandwidth2 : 1.0;
        return fixed_rbf_ops(bw2).gram(P);
    };
    ops.weighted_repulsion = [bandwidth_floor](const Tensor& P, const Tensor& W) {
        double bw2 =
            P.rows() >= 2 ? rbf_median_kernel(P, bandwidth_floor).bandwidth2 : 1.0;
        return fixed_rbf_ops(bw2).weighted_repulsion(P, W);
    };
    return ops;
}

// Learned-kernel ops; the repulsive gradient is obtained by reverse mode
// through the feature network, one backward pass per destination particle.
inline KernelOps deep_rbf_ops(const DeepRbfKernel* kernel) {
    KernelOps ops;
    ops.gram = [kernel](const Tensor& P) { return kernels::gram(*kernel, P, P).K; };
    ops.weighted_repulsion = [kernel](const Tensor& P, const Tensor& W) {
        std::size_t n = P.rows(), d = P.cols();
        Tape tape;
        // copy of the kernel so binding is const-safe
        DeepRbfKernel k = *kernel;
        Var Pv = tape.input(P);
        Var Pc = tape.constant(P);
        auto vars = k.bind(tape);
        Var G = k.gram_var(vars, Pv, Pc);  // G_ab = k(x_a, const x_b)
        Tensor R = Tensor::zeros({n, d});
        for (std::size_t i = 0; i < n; ++i) {
            Tensor M = Tensor::zeros({n, n});
            for (std::size_t a = 0; a < n; ++a) M.at(a, i) = W.at(a, i);
            Var loss = autodiff::sum(autodiff::mul(G, tape.constant(std::move(M))));
            tape.backward(loss);
            Tensor g = tape.grad(Pv);
            for (std::size_t a = 0; a < n; ++a)
                for (std::size_t q = 0; q < d; ++q) R.at(i, q) += g.at(a, q);
        }
        return R;
    };
    return ops;
}

inline KernelOps random_feature_ops(const kernels::RandomFeatureKernel* kernel) {
    KernelOps ops;
    ops.gram = [kernel](const Tensor& P) { return kernels::gram(*kernel, P, P).K; };
    ops.weighted_repulsion = [kernel](const Tensor& P, const Tensor& W) {
        std::size_t n = P.rows(), d = P.cols();
        Tape tape;
        kernels::RandomFeatureKernel k = *kernel;
        Var Pv = tape.input(P);
        Var Pc = tape.constant(P);
        auto vars = k.bind(tape);
        Var G = k.gram_var(tape, vars, Pv, Pc);
        Tensor R = Tensor::zeros({n, d});
        for (std::size_t i = 0; i < n; ++i) {
            Tensor M = Tensor::zeros({n, n});
            for (std::size_t a = 0; a < n; ++a) M.at(a, i) = W.at(a, i);
            Var loss = autodiff::sum(autodiff::mul(G, tape.constant(std::move(M))));
            tape.backward(loss);
            Tensor g = tape.grad(Pv);
            for (std::size_t a = 0; a < n; ++a)
                for (std::size_t q = 0; q < d; ++q) R.at(i, q) += g.at(a, q);
        }
        return R;
    };
    return ops;
}

// Product of kernels over disjoint coordinate blocks. The gram is the
// elementwise product; each block's repulsion is weighted by the product of
// the other blocks' grams.
struct KernelBlock {
    std::size_t c0 = 0, c1 = 0;
    KernelOps ops;
};

inline KernelOps product_ops(std::vector<KernelBlock> blocks) {
    if (blocks.empty()) throw std::invalid_argument("product_ops: no blocks");
    auto shared = std::make_shared<std::vector<KernelBlock>>(std::move(blocks));
    auto sub = [](const Tensor& P, std::size_t c0, std::size_t c1) {
        Tensor S = Tensor::zeros({P.rows(), c1 - c0});
        for (std::size_t i = 0; i < P.rows(); ++i)
            for (std::size_t j = c0; j < c1; ++j) S.at(i, j - c0) = P.at(i, j);
        return S;
    };
    KernelOps ops;
    ops.gram = [shared, sub](const Tensor& P) {
        Tensor G = Tensor::full({P.rows(), P.rows()}, 1.0);
        for (const auto& b : *shared) {
            Tensor Gb = b.ops.gram(sub(P, b.c0, b.c1));
            for (std::size_t k = 0; k < G.data.size(); ++k) G.data[k] *= Gb.data[k];
        }
        return G;
    };
    ops.weighted_repulsion = [shared, sub](const Tensor& P, const Tensor& W) {
        std::size_t n = P.rows();
        std::vector<Tensor> grams;
        for (const auto& b : *shared) grams.push_back(b.ops.gram(sub(P, b.c0, b.c1)));
        Tensor R = Tensor::zeros({n, P.cols()});
        for (std::size_t bi = 0; bi < shared->size(); ++bi) {
            const auto& b = (*shared)[bi];
            Tensor Wb = W;
            for (std::size_t oi = 0; oi < shared->size(); ++oi)
                if (oi != bi)
                    for (std::size_t k = 0; k < Wb.data.size(); ++k)
                        Wb.data[k] *= grams[oi].data[k];
            Tensor Rb = b.ops.weighted_repulsion(sub(P, b.c0, b.c1), Wb);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t q = b.c0; q < b.c1; ++q)
                    R.at(i, q) += Rb.at(i, q - b.c0);
        }
        return R;
    };
    return ops;
}

// ---- the particle update ----

struct SvgdConfig {
    double step_size = 1e-2;
    bool adagrad = false;  // per-coordinate scaling with momentum
    double adagrad_eps = 1e-6;
    double adagrad_momentum = 0.9;
};

struct SvgdState {
    Tensor accum;  // squared-direction accumulator
    bool initialized = false;
};

// x_i <- x_i + eps/n sum_j [grad log q(x_j) k(x_j, x_i) + grad_{x_j} k(x_j, x_i)];
// all updates are computed from the same snapshot, then applied.
inline ParticleSet svgd_step(const ParticleSet& particles, const TargetDensity& target,
                             const KernelOps& kernel, const SvgdConfig& cfg,
                             SvgdState* state = nullptr) {
    if (cfg.step_size <= 0.0) throw std::invalid_argument("svgd_step: step_size > 0");
    particles.validate();
    std::size_t n = particles.count(), d = particles.dim();
    const Tensor& P = particles.X;

    Tensor S = Tensor::zeros({n, d});
    for (std::size_t j = 0; j < n; ++j) {
        auto g = target.grad_log_density(P.row_span(j));
        for (std::size_t q = 0; q < d; ++q) S.at(j, q) = g[q];
    }
    Tensor G = kernel.gram(P);
    Tensor R = kernel.weighted_repulsion(P, Tensor::full({n, n}, 1.0));

    Tensor phi = Tensor::zeros({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t q = 0; q < d; ++q) {
            double drift = 0.0;
            for (std::size_t j = 0; j < n; ++j) drift += S.at(j, q) * G.at(j, i);
            phi.at(i, q) = (drift + R.at(i, q)) / double(n);
        }
    check_finite(phi, "svgd_step");

    ParticleSet out = particles;
    if (cfg.adagrad && state) {
        if (!state->initialized) {
            state->accum = Tensor::zeros({n, d});
            for (std::size_t k = 0; k < phi.data.size(); ++k)
                state->accum.data[k] = phi.data[k] * phi.data[k];
            state->initialized = true;
        } else {
            for (std::size_t k = 0; k < phi.data.size(); ++k)
                state->accum.data[k] = cfg.adagrad_momentum * state->accum.data[k] +
                                       (1.0 - cfg.adagrad_momentum) * phi.data[k] * phi.data[k];
        }
        for (std::size_t k = 0; k < phi.data.size(); ++k)
            out.X.data[k] += cfg.step_size * phi.data[k] /
                             (cfg.adagrad_eps + std::sqrt(state->accum.data[k]));
    } else {
        for (std::size_t k = 0; k < phi.data.size(); ++k)
            out.X.data[k] += cfg.step_size * phi.data[k];
    }
    check_finite(out.X, "svgd_step");
    out.iteration = particles.iteration + 1;
    return out;
}

// ---- alternation of kernel learning and particle updates ----

struct HkSvgdConfig {
    hklearn::HkConfig hk;           // kernel-learning step (outer_steps is m, 1 per the protocol)
    SvgdConfig svgd;
    int alternations = 500;
    bool reinit_kernel_each_alt = false;
    std::uint64_t kernel_seed = 0;
};

struct AlternationRecord {
    int alternation = 0;
    double kernel_objective = 0.0;
    double particle_mean = 0.0;
    double particle_var = 0.0;
};

struct HkSvgdResult {
    ParticleSet particles;
    std::vector<AlternationRecord> trace;
    bool aborted = false;
    std::string abort_reason;
};

inline void particle_moments(const Tensor& X, double& mean, double& var) {
    double m = 0.0;
    for (double v : X.data) m += v;
    m /= double(X.numel());
    double s = 0.0;
    for (double v : X.data) s += (v - m) * (v - m);
    mean = m;
    var = X.numel() > 1 ? s / double(X.numel() - 1) : 0.0;
}

// Alternates one run of the kernel-learning loop on the current particles
// with one SVGD update that uses the learned kernel.
inline HkSvgdResult hk_svgd(const TargetDensity& target, ParticleSet particles,
                            DeepRbfKernel& kernel, const HkSvgdConfig& cfg, Rng& rng) {
    HkSvgdResult out;
    SvgdState state;
    DeepRbfKernel fresh = kernel;
    try {
        for (int a = 1; a <= cfg.alternations; ++a) {
            AlternationRecord rec;
            rec.alternation = a;
            if (particles.count() >= 2) {
                if (cfg.reinit_kernel_each_alt) kernel = fresh;
                auto traj = hklearn::heat_kernel_learning(particles.X, kernel, cfg.hk, rng);
                if (traj.aborted) {
                    out.aborted = true;
                    out.abort_reason = traj.abort_reason;
                    break;
                }
                if (!traj.outer.empty()) rec.kernel_objective = traj.outer.back().end_objective;
            }
            // a zero step size freezes the particles while the kernel trains
            if (cfg.svgd.step_size > 0.0)
                particles = svgd_step(particles, target, deep_rbf_ops(&kernel), cfg.svgd,
                                      &state);
            particle_moments(particles.X, rec.particle_mean, rec.particle_var);
            out.trace.push_back(rec);
        }
    } catch (const std::exception& e) {
        out.aborted = true;
        out.abort_reason = e.what();
    }
    out.particles = std::move(particles);
    return out;
}

}  // namespace hk::svgd

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hk/autodiff.hpp"
#include "hk/kernels.hpp"
#include "hk/nn.hpp"
#include "hk/rng.hpp"
#include "hk/tensor.hpp"
#include "hk/transport.hpp"

namespace hk::hklearn {

using autodiff::AdamState;
using autodiff::Tape;
using autodiff::Var;
using kernels::DeepRbfKernel;
using kernels::RandomFeatureKernel;
using transport::DiscreteMeasure;

enum class EntropyEstimator { A, B };  // A: sum mu log mu, B: kernel-weighted plug-in
enum class MeasureMode { normalized, uniform_init, unnormalized };

struct HkConfig {
    double alpha = 1.0;
    double beta = 5.0;
    double lambda = 0.1;
    int outer_steps = 10;
    int inner_opt_steps = 5;
    std::size_t batch_size = 0;  // 0 = full batch
    EntropyEstimator estimator = EntropyEstimator::A;
    MeasureMode mode = MeasureMode::normalized;
    double lr = 1e-2;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.999;
    bool reset_adam_each_outer = true;
    bool keep_best_inner = false;
    bool plain_sgd = false;       // raw gradient steps instead of Adam
    bool normalized_sgd = false;  // unit-length gradient steps (lr = step length)
    // step-size controller: when > 0, the learning rate is adjusted so the
    // off-diagonal kernel mean advances by about this much per outer step
    double penalty_rate_target = 0.0;
    double lr_min = 2e-3, lr_max = 0.05;
    double sinkhorn_eps_scale = 0.05;  // eps_reg = scale * mean(C)
    int sinkhorn_iters = 50;

    double tau() const { return alpha / (2.0 * beta); }

    void validate() const {
        if (alpha < 0 || beta < 0 || lambda < 0)
            throw std::invalid_argument("HkConfig: weights must be >= 0");
        if (beta <= 0) throw std::invalid_argument("HkConfig: beta > 0 required (tau = alpha/2beta)");
        if (outer_steps < 0 || inner_opt_steps < 0)
            throw std::invalid_argument("HkConfig: negative step counts");
        if (lr <= 0) throw std::invalid_argument("HkConfig: lr > 0");
        if (sinkhorn_iters < 1) throw std::invalid_argument("HkConfig: sinkhorn_iters >= 1");
    }
};

// previous-step measure over the current batch, treated as a constant
struct MeasureSnapshot {
    DiscreteMeasure nu;
    Tensor points;
};

struct TrajectoryPoint {
    int outer = 0;
    int inner = 0;
    double objective = 0.0;
    double entropy = 0.0;
    double wasserstein = 0.0;
    double penalty = 0.0;
    std::vector<double> weights;
};

struct OuterRecord {
    int outer = 0;
    double start_objective = 0.0;
    double end_objective = 0.0;
};

struct Trajectory {
    std::vector<TrajectoryPoint> points;
    std::vector<OuterRecord> outer;
    bool aborted = false;
    std::string abort_reason;
};

// ---- measures ----

inline DiscreteMeasure uniform_measure(std::size_t n) { return DiscreteMeasure::uniform(n); }

inline DiscreteMeasure normalized_kde_from_gram(const Tensor& G) {
    std::size_t n = G.rows();
    if (G.cols() != n) throw std::invalid_argument("normalized_kde: square gram required");
    DiscreteMeasure mu;
    mu.w.assign(n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            mu.w[i] += G.at(j, i);  // sum_j k(x_j, x_i)
            total += G.at(j, i);
        }
    if (total <= 0.0) throw std::runtime_error("normalized_kde: zero denominator");
    for (auto& w : mu.w) w /= total;
    return mu;
}

template <class K>
DiscreteMeasure normalized_kde(const K& kernel, const Tensor& X) {
    if (X.rows() < 1) throw std::invalid_argument("normalized_kde: empty batch");
    return normalized_kde_from_gram(kernels::gram(kernel, X, X).K);
}

inline Var normalized_kde_var(Var G) {
    using namespace autodiff;
    return div(colsum(G), sum(G));
}

// Appendix-style variant with the time-zero kernel in the denominator;
// the result is not renormalized to the simplex.
template <class K>
std::vector<double> unnormalized_ratio_measure(const K& kernel_t, const K& kernel_0,
                                               const Tensor& X) {
    std::size_t n = X.rows();
    Tensor Gt = kernels::gram(kernel_t, X, X).K;
    Tensor G0 = kernels::gram(kernel_0, X, X).K;
    std::vector<double> w(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            num += Gt.at(j, i);
            den += G0.at(j, i);
        }
        if (den <= 0.0) throw std::runtime_error("unnormalized_ratio_measure: zero denominator");
        w[i] = num / (double(n) * den);
    }
    return w;
}

// ---- entropy ----

inline double neg_entropy_from(const std::vector<double>& mu, const Tensor& G,
                               EntropyEstimator tag) {
    std::size_t n = mu.size();
    if (tag == EntropyEstimator::A) {
        double s = 0.0;
        for (double w : mu) {
            if (w <= 0.0) throw std::runtime_error("neg_entropy: nonpositive weight");
            s += w * std::log(w);
        }
        return s;
    }
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < n; ++i) {
            double k = G.at(j, i);
            if (k <= 0.0) throw std::runtime_error("neg_entropy: nonpositive kernel value");
            s += mu[i] * std::log(k);
        }
    return s / double(n);
}

template <class K>
double neg_entropy(const DiscreteMeasure& mu, const K& kernel, const Tensor& X,
                   EntropyEstimator tag) {
    Tensor G = kernels::gram(kernel, X, X).K;
    return neg_entropy_from(mu.w, G, tag);
}

inline Var neg_entropy_var(Var mu, Var G, EntropyEstimator tag) {
    using namespace autodiff;
    if (tag == EntropyEstimator::A) return sum(mul(mu, log(mu)));
    std::size_t n = mu.tape->value(mu).numel();
    return mul_scalar(sum(mul_rowvec(log(G), mu)), 1.0 / double(n));
}

// ---- objective (Eq. 4 style) ----

struct ObjectiveParts {
    double objective = 0.0;
    double entropy = 0.0;
    double wasserstein = 0.0;
    double penalty = 0.0;
    std::vector<double> weights;
};

namespace detail {

inline Var gram_of(Tape& tape, const DeepRbfKernel& k, const autodiff::MlpVars& bound, Var X,
                   Var Y) {
    (void)tape;
    return k.gram_var(bound, X, Y);
}

inline Var gram_of(Tape& tape, const RandomFeatureKernel& k,
                   const RandomFeatureKernel::BoundVars& bound, Var X, Var Y) {
    return k.gram_var(tape, bound, X, Y, false);
}

inline autodiff::MlpVars bind_kernel(Tape& tape, DeepRbfKernel& k) { return k.bind(tape); }
inline RandomFeatureKernel::BoundVars bind_kernel(Tape& tape, RandomFeatureKernel& k) {
    return k.bind(tape);
}

inline Tensor offdiag_mask(std::size_t n) {
    Tensor M = Tensor::full({n, n}, 1.0);
    for (std::size_t i = 0; i < n; ++i) M.at(i, i) = 0.0;
    return M;
}

}  // namespace detail

struct ObjectiveVars {
    Var objective;
    Var mu;
    Var entropy;
    Var wasserstein;
    Var penalty;
};

// alpha H(mu) + beta W2(nu, mu) - lambda E_{i != j}[k(x_j, x_i)], with mu the
// measure selected by cfg.mode over the batch held in `Xc`.
template <class K, class B>
ObjectiveVars hk_objective_var(Tape& tape, const K& kernel, const B& bound, Var Xc,
                               const MeasureSnapshot& nu, const HkConfig& cfg,
                               const std::vector<double>* denom0 = nullptr) {
    using namespace autodiff;
    const Tensor& X = tape.value(Xc);
    std::size_t n = X.rows();
    if (nu.nu.size() != n) throw std::invalid_argument("hk_objective: nu size mismatch");

    Var G = detail::gram_of(tape, kernel, bound, Xc, Xc);

    Var mu{};
    Var mu_simplex{};
    if (cfg.mode == MeasureMode::unnormalized) {
        if (!denom0) throw std::invalid_argument("hk_objective: unnormalized mode needs denom0");
        Tensor d0 = Tensor::zeros({n});
        for (std::size_t i = 0; i < n; ++i) d0.data[i] = double(n) * (*denom0)[i];
        mu = div(colsum(G), tape.constant(std::move(d0)));
        mu_simplex = div(mu, sum(mu));
    } else {
        mu = normalized_kde_var(G);
        mu_simplex = mu;
    }

    Var H = neg_entropy_var(mu, G, cfg.estimator);

    Tensor C = transport::cost_matrix(X, X);
    double eps = std::max(cfg.sinkhorn_eps_scale * transport::matrix_mean(C), 1e-12);
    Var nu_c = tape.constant(Tensor::vector(nu.nu.w));
    Var Cc = tape.constant(C);
    auto sk = transport::sinkhorn_unrolled(tape, nu_c, mu_simplex, Cc, eps, cfg.sinkhorn_iters);

    Var mask = tape.constant(detail::offdiag_mask(n));
    double cnt = n > 1 ? double(n) * double(n - 1) : 1.0;
    Var pen = mul_scalar(sum(mul(G, mask)), 1.0 / cnt);

    ObjectiveVars out;
    out.mu = mu;
    out.entropy = H;
    out.wasserstein = sk.distance;
    out.penalty = pen;
    out.objective = add(add(mul_scalar(H, cfg.alpha), mul_scalar(sk.distance, cfg.beta)),
                        mul_scalar(pen, -cfg.lambda));
    return out;
}

template <class K>
double hk_objective(K& kernel, const Tensor& X, const MeasureSnapshot& nu, const HkConfig& cfg,
                    ObjectiveParts* parts = nullptr,
                    const std::vector<double>* denom0 = nullptr) {
    Tape tape;
    Var Xc = tape.constant(X);
    auto bound = detail::bind_kernel(tape, kernel);
    auto obj = hk_objective_var(tape, kernel, bound, Xc, nu, cfg, denom0);
    if (parts) {
        parts->objective = tape.value(obj.objective).value();
        parts->entropy = tape.value(obj.entropy).value();
        parts->wasserstein = tape.value(obj.wasserstein).value();
        parts->penalty = tape.value(obj.penalty).value();
        parts->weights = tape.value(obj.mu).data;
    }
    return tape.value(obj.objective).value();
}

// ---- Algorithm 1: JKO-style outer iteration ----

namespace detail {

template <class K>
DiscreteMeasure current_measure(K& kernel, const K* kernel0, const Tensor& X,
                                const HkConfig& cfg) {
    if (cfg.mode == MeasureMode::unnormalized && kernel0) {
        auto w = unnormalized_ratio_measure(kernel, *kernel0, X);
        double s = 0.0;
        for (double v : w) s += v;
        if (s <= 0.0) throw std::runtime_error("measure: nonpositive total");
        DiscreteMeasure m;
        m.w = w;
        for (auto& v : m.w) v /= s;
        return m;
    }
    return normalized_kde(kernel, X);
}

inline Tensor take_rows(const Tensor& X, const std::vector<std::size_t>& idx) {
    Tensor out = Tensor::zeros({idx.size(), X.cols()});
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < X.cols(); ++j) out.at(i, j) = X.at(idx[i], j);
    return out;
}

}  // namespace detail

// optimizer state that can be carried across segmented runs
struct HkState {
    AdamState adam;
    double lr = 0.0;
    double rate_ema = 0.0;
    bool initialized = false;
};

// Trains the kernel in place; returns the recorded trajectory. Each outer
// step snapshots nu from the current kernel, runs inner Adam updates on the
// objective, then adopts the updated measure as the next nu.
template <class K>
Trajectory heat_kernel_learning(const Tensor& X, K& kernel, const HkConfig& cfg, Rng& rng,
                                HkState* carry = nullptr) {
    cfg.validate();
    Trajectory traj;
    if (cfg.outer_steps == 0) return traj;
    if (X.rows() < 2) throw std::invalid_argument("heat_kernel_learning: need >= 2 samples");

    std::optional<K> kernel0;
    if (cfg.mode == MeasureMode::unnormalized) kernel0 = kernel;

    HkState local;
    HkState& st = carry ? *carry : local;
    if (!st.initialized) {
        st.adam.lr = cfg.lr;
        st.adam.beta1 = cfg.adam_beta1;
        st.adam.beta2 = cfg.adam_beta2;
        st.lr = cfg.lr;
        st.rate_ema = cfg.penalty_rate_target;
        st.initialized = true;
    }
    AdamState& adam = st.adam;
    double& lr = st.lr;
    double& rate_ema = st.rate_ema;

    std::size_t n_full = X.rows();
    std::size_t bs = (cfg.batch_size == 0 || cfg.batch_size >= n_full) ? n_full : cfg.batch_size;

    Tensor batch = X;
    std::vector<std::size_t> perm(n_full);
    for (std::size_t i = 0; i < n_full; ++i) perm[i] = i;
    auto draw_batch = [&]() {
        if (bs == n_full) return;
        // without replacement: duplicate support points would distort the KDE
        for (std::size_t i = 0; i < bs; ++i)
            std::swap(perm[i], perm[i + rng.below(n_full - i)]);
        batch = detail::take_rows(X, std::vector<std::size_t>(perm.begin(), perm.begin() + bs));
    };
    draw_batch();

    try {
        for (int k = 1; k <= cfg.outer_steps; ++k) {
            if (k > 1) draw_batch();
            MeasureSnapshot snap;
            snap.points = batch;
            if (cfg.mode == MeasureMode::uniform_init && k == 1)
                snap.nu = uniform_measure(batch.rows());
            else
                snap.nu = detail::current_measure(kernel, kernel0 ? &*kernel0 : nullptr, batch,
                                                  cfg);

            std::vector<double> denom0_vec;
            const std::vector<double>* denom0 = nullptr;
            if (cfg.mode == MeasureMode::unnormalized) {
                Tensor G0 = kernels::gram(*kernel0, batch, batch).K;
                denom0_vec.assign(batch.rows(), 0.0);
                for (std::size_t i = 0; i < batch.rows(); ++i)
                    for (std::size_t j = 0; j < batch.rows(); ++j)
                        denom0_vec[i] += G0.at(j, i) / double(batch.rows());
                denom0 = &denom0_vec;
            }

            if (cfg.reset_adam_each_outer) adam.reset();

            ObjectiveParts parts;
            double start_obj = hk_objective(kernel, batch, snap, cfg, &parts, denom0);
            K best = kernel;
            double best_obj = start_obj;

            auto run_inner = [&](std::vector<TrajectoryPoint>& pts) {
                for (int s = 1; s <= cfg.inner_opt_steps; ++s) {
                    Tape tape;
                    Var Xc = tape.constant(batch);
                    auto bound = detail::bind_kernel(tape, kernel);
                    auto obj = hk_objective_var(tape, kernel, bound, Xc, snap, cfg, denom0);
                    TrajectoryPoint pt;
                    pt.outer = k;
                    pt.inner = s;
                    pt.objective = tape.value(obj.objective).value();
                    pt.entropy = tape.value(obj.entropy).value();
                    pt.wasserstein = tape.value(obj.wasserstein).value();
                    pt.penalty = tape.value(obj.penalty).value();
                    pt.weights = tape.value(obj.mu).data;
                    pts.push_back(std::move(pt));

                    tape.backward(obj.objective);
                    autodiff::collect_grads(tape, kernel.params);
                    if (cfg.plain_sgd || cfg.normalized_sgd) {
                        double scale = lr;
                        if (cfg.normalized_sgd) {
                            double norm2 = 0.0;
                            for (auto& [name, p] : kernel.params.values) {
                                const Tensor& g = kernel.params.grad(name);
                                for (double v : g.data) norm2 += v * v;
                            }
                            scale = lr / std::max(std::sqrt(norm2), 1e-12);
                        }
                        for (auto& [name, p] : kernel.params.values) {
                            const Tensor& g = kernel.params.grad(name);
                            for (std::size_t q = 0; q < p.data.size(); ++q)
                                p.data[q] -= scale * g.data[q];
                        }
                    } else {
                        autodiff::adam_step(kernel.params, adam);
                    }

                    if (cfg.keep_best_inner) {
                        double cur = hk_objective(kernel, batch, snap, cfg, nullptr, denom0);
                        if (cur < best_obj) {
                            best_obj = cur;
                            best = kernel;
                        }
                    }
                }
            };

            std::vector<TrajectoryPoint> inner_pts;
            if (cfg.penalty_rate_target > 0.0) {
                // trust region on the realized kernel-mean motion: reject and
                // retry at a smaller step when one update bursts past it
                auto params_backup = kernel.params.values;
                auto adam_backup = adam;
                double delta = 0.0;
                for (int attempt = 0;; ++attempt) {
                    inner_pts.clear();
                    run_inner(inner_pts);
                    double end_pen = kernels::gram(kernel, batch, batch).offdiag_mean();
                    delta = end_pen - parts.penalty;
                    if (delta <= 1.5 * cfg.penalty_rate_target || attempt >= 3) break;
                    kernel.params.values = params_backup;
                    adam = adam_backup;
                    lr = std::max(lr * 0.5, cfg.lr_min);
                    adam.lr = lr;
                }
                if (delta <= 0.0) delta = cfg.penalty_rate_target / 4.0;
                rate_ema = 0.5 * rate_ema + 0.5 * delta;
                double factor = cfg.penalty_rate_target / std::max(rate_ema, 1e-12);
                factor = std::min(std::max(factor, 0.4), 1.6);
                lr = std::min(std::max(lr * factor, cfg.lr_min), cfg.lr_max);
                adam.lr = lr;
            } else {
                run_inner(inner_pts);
            }
            for (auto& pt : inner_pts) traj.points.push_back(std::move(pt));

            if (cfg.keep_best_inner) {
                double cur = hk_objective(kernel, batch, snap, cfg, nullptr, denom0);
                if (cur > best_obj) kernel = best;
            }
            double end_obj = hk_objective(kernel, batch, snap, cfg, nullptr, denom0);
            traj.outer.push_back(OuterRecord{k, start_obj, end_obj});
        }
    } catch (const std::exception& e) {
        traj.aborted = true;
        traj.abort_reason = e.what();
    }
    return traj;
}

}  // namespace hk::hklearn

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "hk/autodiff.hpp"
#include "hk/hklearn.hpp"
#include "hk/kernels.hpp"
#include "hk/nn.hpp"
#include "hk/rng.hpp"
#include "hk/tensor.hpp"
#include "hk/transport.hpp"

namespace hk::genmodel {

using autodiff::MlpSpec;
using autodiff::MlpVars;
using autodiff::ParamStore;
using autodiff::Tape;
using autodiff::Var;
using kernels::DeepRbfKernel;
using kernels::RandomFeatureKernel;

enum class MmdEstimator { biased, unbiased };

// ---- MMD and SMMD ----

namespace detail {

inline double same_set_mean(const Tensor& G, MmdEstimator est) {
    std::size_t n = G.rows();
    if (est == MmdEstimator::biased) {
        double s = 0.0;
        for (double v : G.data) s += v;
        return s / double(n * n);
    }
    if (n < 2) throw std::invalid_argument("mmd2: unbiased estimator needs >= 2 samples");
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) s += G.at(i, j);
    return s / double(n * (n - 1));
}

inline double cross_mean(const Tensor& G) {
    double s = 0.0;
    for (double v : G.data) s += v;
    return s / double(G.numel());
}

inline Var same_set_mean_var(Tape& tape, Var G, MmdEstimator est) {
    using namespace autodiff;
    std::size_t n = tape.value(G).rows();
    if (est == MmdEstimator::biased) return mean(G);
    if (n < 2) throw std::invalid_argument("mmd2: unbiased estimator needs >= 2 samples");
    Tensor M = Tensor::full({n, n}, 1.0);
    for (std::size_t i = 0; i < n; ++i) M.at(i, i) = 0.0;
    return mul_scalar(sum(mul(G, tape.constant(std::move(M)))), 1.0 / double(n * (n - 1)));
}

}  // namespace detail

inline double mmd2_from_grams(const Tensor& Gxx, const Tensor& Gyy, const Tensor& Gxy,
                              MmdEstimator est) {
    return detail::same_set_mean(Gxx, est) + detail::same_set_mean(Gyy, est) -
           2.0 * detail::cross_mean(Gxy);
}

template <class K>
double mmd2(const K& kernel, const Tensor& X, const Tensor& Y, MmdEstimator est) {
    if (est == MmdEstimator::unbiased && (X.rows() < 2 || Y.rows() < 2))
        throw std::invalid_argument("mmd2: unbiased estimator needs >= 2 samples per batch");
    Tensor Gxx = kernels::gram(kernel, X, X).K;
    Tensor Gyy = kernels::gram(kernel, Y, Y).K;
    Tensor Gxy = kernels::gram(kernel, X, Y).K;
    return mmd2_from_grams(Gxx, Gyy, Gxy, est);
}

inline Var mmd2_var(Tape& tape, Var Gxx, Var Gyy, Var Gxy, MmdEstimator est) {
    using namespace autodiff;
    Var a = detail::same_set_mean_var(tape, Gxx, est);
    Var b = detail::same_set_mean_var(tape, Gyy, est);
    Var c = mean(Gxy);
    return add(add(a, b), mul_scalar(c, -2.0));
}

// scale of the scaled MMD: sigma = 1 / (zeta + E k(x,x) + E trace cross-derivatives)
inline double smmd_sigma(const DeepRbfKernel& kernel, const Tensor& X, double zeta) {
    if (zeta <= 0.0) throw std::invalid_argument("smmd: zeta > 0 required");
    // k(x,x) = 1 for this family; the trace term is 2 ||J_h(x)||_F^2
    double tr = 0.0;
    for (std::size_t i = 0; i < X.rows(); ++i) {
        Tape tape;
        DeepRbfKernel k = kernel;
        Var x = tape.constant(Tensor::matrix(1, X.cols(), std::vector<double>(
                                                              X.row_span(i).begin(),
                                                              X.row_span(i).end())));
        Var f2 = autodiff::mlp_jacobian_frob2(k.spec, k.bind(tape), x);
        tr += 2.0 * tape.value(f2).value();
    }
    tr /= double(X.rows());
    double den = zeta + 1.0 + tr;
    if (den <= 0.0) throw std::runtime_error("smmd: nonpositive scale denominator");
    return 1.0 / den;
}

inline double smmd_sigma(const RandomFeatureKernel& kernel, const Tensor& X, double zeta) {
    if (zeta <= 0.0) throw std::invalid_argument("smmd: zeta > 0 required");
    double kd = 0.0, tr = 0.0;
    auto fn = [&kernel](std::span<const double> a, std::span<const double> b) {
        return kernel.eval(a, b);
    };
    for (std::size_t i = 0; i < X.rows(); ++i) {
        kd += 1.0;  // unit diagonal under the mixing rule
        tr += autodiff::hessian_trace_cross(fn, X.row_span(i));
    }
    kd /= double(X.rows());
    tr /= double(X.rows());
    double den = zeta + kd + tr;
    if (den <= 0.0) throw std::runtime_error("smmd: nonpositive scale denominator");
    return 1.0 / den;
}

template <class K>
double smmd2(const K& kernel, const Tensor& X, const Tensor& Y, double zeta,
             MmdEstimator est = MmdEstimator::biased, double* sigma_out = nullptr) {
    double sigma = smmd_sigma(kernel, X, zeta);
    if (sigma_out) *sigma_out = sigma;
    return sigma * mmd2(kernel, X, Y, est);
}

// differentiable sigma for the deep RBF family (used when the kernel
// objective is scaled by the SMMD factor)
inline Var smmd_sigma_var(Tape& tape, const DeepRbfKernel& kernel, const MlpVars& vars,
                          Var Xc, double zeta) {
    using namespace autodiff;
    const Tensor& X = tape.value(Xc);
    Var acc = tape.constant(Tensor::scalar(0.0));
    for (std::size_t i = 0; i < X.rows(); ++i) {
        Var row = block(Xc, i, 1, 0, X.cols());
        acc = add(acc, mlp_jacobian_frob2(kernel.spec, vars, row));
    }
    Var tr = mul_scalar(acc, 2.0 / double(X.rows()));
    Var den = add_scalar(tr, zeta + 1.0);
    return div(tape.constant(Tensor::scalar(1.0)), den);
}

// ---- pair expectation (the 1/4 pooled decomposition) ----

inline double pair_expectation_from(const Tensor& Gxx, const Tensor& Gyy, const Tensor& Gxy,
                                    MmdEstimator est) {
    return 0.25 * (detail::same_set_mean(Gyy, est) + 2.0 * detail::cross_mean(Gxy) +
                   detail::same_set_mean(Gxx, est));
}

template <class K>
double pair_expectation(const K& kernel, const Tensor& X, const Tensor& Y,
                        MmdEstimator est = MmdEstimator::biased) {
    if (X.numel() == 0 || Y.numel() == 0)
        throw std::invalid_argument("pair_expectation: empty batch");
    Tensor Gxx = kernels::gram(kernel, X, X).K;
    Tensor Gyy = kernels::gram(kernel, Y, Y).K;
    Tensor Gxy = kernels::gram(kernel, X, Y).K;
    return pair_expectation_from(Gxx, Gyy, Gxy, est);
}

inline Var pair_expectation_var(Tape& tape, Var Gxx, Var Gyy, Var Gxy, MmdEstimator est) {
    using namespace autodiff;
    Var s = add(add(detail::same_set_mean_var(tape, Gyy, est),
                    mul_scalar(mean(Gxy), 2.0)),
                detail::same_set_mean_var(tape, Gxx, est));
    return mul_scalar(s, 0.25);
}

// ---- Taylor bound for the deep RBF family ----

struct TaylorBound {
    double kernel_value = 0.0;
    double jacobian_frob = 0.0;
    double feature_dist = 0.0;
    double value = 0.0;  // k(y,x) * ||grad h(x)||_F * ||h(x) - h(y)||
};

inline TaylorBound taylor_bound_rbf(const DeepRbfKernel& kernel, std::span<const double> x,
                                    std::span<const double> y) {
    TaylorBound tb;
    tb.kernel_value = kernel.eval(y, x);
    Tensor in = Tensor::zeros({2, x.size()});
    for (std::size_t k = 0; k < x.size(); ++k) {
        in.at(0, k) = x[k];
        in.at(1, k) = y[k];
    }
    Tensor H = kernel.features(in);
    tb.feature_dist = std::sqrt(sqdist(H.row_span(0), H.row_span(1)));

    Tape tape;
    DeepRbfKernel k = kernel;
    Var xv = tape.constant(Tensor::matrix(1, x.size(), std::vector<double>(x.begin(), x.end())));
    Var f2 = autodiff::mlp_jacobian_frob2(k.spec, k.bind(tape), xv);
    tb.jacobian_frob = std::sqrt(tape.value(f2).value());
    tb.value = tb.kernel_value * tb.jacobian_frob * tb.feature_dist;
    return tb;
}

// ---- generator ----

struct Generator {
    MlpSpec spec;
    ParamStore params;
    std::size_t noise_dim = 8;
    std::string prefix = "g";

    static Generator create(std::size_t noise_dim, std::size_t hidden, std::size_t data_dim,
                            std::uint64_t seed) {
        Generator g;
        g.noise_dim = noise_dim;
        g.spec = MlpSpec::make({noise_dim, hidden, hidden, data_dim});
        Rng rng(seed);
        autodiff::init_mlp(g.params, g.prefix, g.spec, rng);
        return g;
    }

    Tensor noise_batch(std::size_t n, Rng& rng) const {
        Tensor Z = Tensor::zeros({n, noise_dim});
        for (auto& v : Z.data) v = rng.normal();
        return Z;
    }

    Tensor sample(std::size_t n, Rng& rng) const {
        return autodiff::plain_mlp_apply(params, prefix, spec, noise_batch(n, rng));
    }

    Tensor sample_from(const Tensor& Z) const {
        return autodiff::plain_mlp_apply(params, prefix, spec, Z);
    }

    std::size_t data_dim() const { return spec.output_dim(); }
};

// ---- configuration ----

enum class GanLoss { mmd, smmd };
enum class KernelFamily { deep_rbf, random_feature };

struct GanConfig {
    double gamma1 = 1.0, gamma2 = 0.0, gamma3 = 1.0, gamma4 = 0.0, gamma5 = 0.0;
    double alpha = 0.5, beta = 2.5, lambda = 1.0;
    double zeta = 1.0;
    GanLoss loss = GanLoss::mmd;
    KernelFamily family = KernelFamily::deep_rbf;
    MmdEstimator estimator = MmdEstimator::biased;   // pairing shared by Eq.-8 terms
    MmdEstimator gen_estimator = MmdEstimator::unbiased;
    int generator_steps = 2000;
    int kernel_steps = 1;        // j in the alternation
    int jko_steps = 1;           // m
    int kernel_inner_adam = 1;
    std::size_t batch_size = 64;
    bool scale_kernel_objective = false;  // multiply the objective by the SMMD sigma
    bool spectral_norm = true;            // applied to h layers when not scaling
    double spectral_post_scale = 1.0;
    int spectral_power_iters = 2;
    double lr_gen = 1e-3, lr_kernel = 1e-3;
    double adam_beta1 = 0.5, adam_beta2 = 0.999;
    int sinkhorn_iters = 20;
    double sinkhorn_eps_scale = 0.1;
    hklearn::EntropyEstimator entropy = hklearn::EntropyEstimator::A;

    void validate() const {
        for (double g : {gamma1, gamma2, gamma3, gamma4, gamma5, alpha, beta, lambda})
            if (g < 0) throw std::invalid_argument("GanConfig: weights >= 0");
        if (loss == GanLoss::smmd && zeta <= 0)
            throw std::invalid_argument("GanConfig: zeta > 0 for smmd");
        if (batch_size < 2) throw std::invalid_argument("GanConfig: batch_size >= 2");
    }
};

// ---- the two-manifold kernel objectives ----

struct KernelObjectiveVars {
    Var objective;
    Var entropy;
    Var wasserstein;
    Var pair_term;
    Var mu;
};

namespace detail {

// pooled-batch entropy + transport part shared by both kernel families
inline void pooled_flow_terms(Tape& tape, Var Gpool, const Tensor& pooled,
                              const transport::DiscreteMeasure& nu, const GanConfig& cfg,
                              KernelObjectiveVars& out) {
    using namespace autodiff;
    out.mu = hklearn::normalized_kde_var(Gpool);
    out.entropy = hklearn::neg_entropy_var(out.mu, Gpool, cfg.entropy);
    Tensor C = transport::cost_matrix(pooled, pooled);
    double eps = std::max(cfg.sinkhorn_eps_scale * transport::matrix_mean(C), 1e-12);
    Var nu_c = tape.constant(Tensor::vector(nu.w));
    auto sk = transport::sinkhorn_unrolled(tape, nu_c, out.mu, tape.constant(C), eps,
                                           cfg.sinkhorn_iters);
    out.wasserstein = sk.distance;
}

inline Var offdiag_mean_var(Tape& tape, Var D) {
    using namespace autodiff;
    std::size_t n = tape.value(D).rows();
    if (n < 2) throw std::invalid_argument("offdiag mean needs n >= 2");
    Tensor M = Tensor::full({n, n}, 1.0);
    for (std::size_t i = 0; i < n; ++i) M.at(i, i) = 0.0;
    return mul_scalar(sum(mul(D, tape.constant(std::move(M)))), 1.0 / double(n * (n - 1)));
}

inline Var mean_feature_dist(Tape& tape, Var HA, Var HB, MmdEstimator est, bool same_set) {
    using namespace autodiff;
    Var D = sqrt(pairwise_sqdist(HA, HB));
    if (!same_set || est == MmdEstimator::biased) return mean(D);
    return offdiag_mean_var(tape, D);
}

}  // namespace detail

// Kernel objective for the deep RBF family: the single-manifold flow terms
// over the pooled batch plus the cross- and same-set attraction/smoothness
// terms weighted by gamma1..gamma4.
inline KernelObjectiveVars kernel_objective_rbf_var(Tape& tape, const DeepRbfKernel& kernel,
                                                    const MlpVars& vars, Var Xc, Var Yc,
                                                    const transport::DiscreteMeasure& nu,
                                                    const GanConfig& cfg) {
    using namespace autodiff;
    const Tensor &X = tape.value(Xc), &Y = tape.value(Yc);
    std::size_t n = X.rows(), m = Y.rows();
    Tensor pooled = Tensor::zeros({n + m, X.cols()});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < X.cols(); ++c) pooled.at(i, c) = X.at(i, c);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t c = 0; c < X.cols(); ++c) pooled.at(n + j, c) = Y.at(j, c);
    if (nu.size() != n + m)
        throw std::invalid_argument("kernel_objective: nu must live on the pooled batch");

    Var Pc = tape.constant(pooled);
    Var Hpool = kernel.features_var(vars, Pc);
    Var Gpool = kernel.gram_from_features(Hpool, Hpool);

    KernelObjectiveVars out;
    detail::pooled_flow_terms(tape, Gpool, pooled, nu, cfg, out);

    std::size_t p = tape.value(Hpool).cols();
    Var HX = block(Hpool, 0, n, 0, p);
    Var HY = block(Hpool, n, m, 0, p);
    Var Gxx = block(Gpool, 0, n, 0, n);
    Var Gyy = block(Gpool, n, m, n, m);
    Var Gxy = block(Gpool, 0, n, n, m);

    out.pair_term = pair_expectation_var(tape, Gxx, Gyy, Gxy, cfg.estimator);

    Var obj = add(add(mul_scalar(out.entropy, cfg.alpha),
                      mul_scalar(out.wasserstein, cfg.beta)),
                  mul_scalar(out.pair_term, -cfg.lambda));
    if (cfg.gamma1 > 0) obj = add(obj, mul_scalar(mean(Gxy), cfg.gamma1));
    if (cfg.gamma2 > 0)
        obj = add(obj, mul_scalar(detail::mean_feature_dist(tape, HX, HY, cfg.estimator, false),
                                  cfg.gamma2));
    if (cfg.gamma3 > 0)
        obj = add(obj, mul_scalar(detail::same_set_mean_var(tape, Gxx, cfg.estimator),
                                  cfg.gamma3));
    if (cfg.gamma4 > 0)
        obj = add(obj, mul_scalar(detail::mean_feature_dist(tape, HX, HX, cfg.estimator, true),
                                  cfg.gamma4));
    if (cfg.scale_kernel_objective)
        obj = mul(obj, smmd_sigma_var(tape, kernel, vars, Xc, cfg.zeta));
    out.objective = obj;
    return out;
}

inline double kernel_objective_rbf(DeepRbfKernel& kernel, const Tensor& X, const Tensor& Y,
                                   const transport::DiscreteMeasure& nu, const GanConfig& cfg) {
    Tape tape;
    Var Xc = tape.constant(X), Yc = tape.constant(Y);
    auto vars = kernel.bind(tape);
    auto obj = kernel_objective_rbf_var(tape, kernel, vars, Xc, Yc, nu, cfg);
    return tape.value(obj.objective).value();
}

// mean over pairs of the sine analogue of the random-feature kernel:
// E sin(w_g' [h(y)-h(x)]) + E sin(w_{p,x,y}' [h(y)-h(x)])
inline Var k_sin_mean_var(Tape& tape, const RandomFeatureKernel& rf,
                          const RandomFeatureKernel::BoundVars& vars, Var HX, Var HY,
                          MmdEstimator est, bool same_set) {
    using namespace autodiff;
    const Tensor &hx = tape.value(HX), &hy = tape.value(HY);
    std::size_t n = hx.rows(), m = hy.rows();
    std::size_t L = rf.num_freq;
    Tensor Z = rf.noise();
    Var Zc = tape.constant(Z);

    // rows enumerate (i over X, j over Y): h(y_j) - h(x_i)
    Var Dg = neg(kernels::detail::expand_pair_diff(tape, HX, HY, 1));  // (n*m) x p
    Var Omega = mlp_apply(rf.freq_global_spec, vars.freq_global, Zc);  // L x p
    Var Pg = matmul(Dg, transpose(Omega));                             // (n*m) x L
    Var sg = mul_scalar(rowsum(sin(Pg)), 1.0 / double(L));             // (n*m)

    Var B = kernels::detail::build_pair_inputs(tape, HX, HY, Z);       // (n*m*L) x (q+2p)
    Var Wp = mlp_apply(rf.freq_pair_spec, vars.freq_pair, B);          // rows x p
    Var Dp = neg(kernels::detail::expand_pair_diff(tape, HX, HY, L));  // rows x p
    Var sp_rows = sin(rowsum(mul(Wp, Dp)));                            // rows
    Var sp = kernels::detail::group_mean(tape, sp_rows, n, m, L);      // n x m

    Var total = add(kernels::detail::group_mean(tape, sg, n, m, 1), sp);
    if (!same_set || est == MmdEstimator::biased) return mean(total);
    return detail::offdiag_mean_var(tape, total);
}

// Appendix-style objective for the random-feature family: sine terms replace
// the gamma1/gamma3 kernel attractions and gamma5 penalizes frequency
// magnitudes together with the pair-net input sensitivity.
inline KernelObjectiveVars kernel_objective_dk_var(Tape& tape, const RandomFeatureKernel& rf,
                                                   const RandomFeatureKernel::BoundVars& vars,
                                                   Var Xc, Var Yc,
                                                   const transport::DiscreteMeasure& nu,
                                                   const GanConfig& cfg) {
    using namespace autodiff;
    const Tensor &X = tape.value(Xc), &Y = tape.value(Yc);
    std::size_t n = X.rows(), m = Y.rows();
    Tensor pooled = Tensor::zeros({n + m, X.cols()});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < X.cols(); ++c) pooled.at(i, c) = X.at(i, c);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t c = 0; c < X.cols(); ++c) pooled.at(n + j, c) = Y.at(j, c);
    if (nu.size() != n + m)
        throw std::invalid_argument("kernel_objective: nu must live on the pooled batch");

    Var Pc = tape.constant(pooled);
    Var Hpool = rf.features_var(vars, Pc);
    Var Gpool = rf.gram_from_features_var(tape, vars, Hpool, Hpool, false);

    KernelObjectiveVars out;
    detail::pooled_flow_terms(tape, Gpool, pooled, nu, cfg, out);

    std::size_t p = tape.value(Hpool).cols();
    Var HX = block(Hpool, 0, n, 0, p);
    Var HY = block(Hpool, n, m, 0, p);
    Var Gxx = block(Gpool, 0, n, 0, n);
    Var Gyy = block(Gpool, n, m, n, m);
    Var Gxy = block(Gpool, 0, n, n, m);
    out.pair_term = pair_expectation_var(tape, Gxx, Gyy, Gxy, cfg.estimator);

    Var obj = add(add(mul_scalar(out.entropy, cfg.alpha),
                      mul_scalar(out.wasserstein, cfg.beta)),
                  mul_scalar(out.pair_term, -cfg.lambda));
    if (cfg.gamma1 > 0)
        obj = add(obj, mul_scalar(k_sin_mean_var(tape, rf, vars, HX, HY, cfg.estimator, false),
                                  cfg.gamma1));
    if (cfg.gamma2 > 0)
        obj = add(obj, mul_scalar(detail::mean_feature_dist(tape, HX, HY, cfg.estimator, false),
                                  cfg.gamma2));
    if (cfg.gamma3 > 0)
        obj = add(obj, mul_scalar(k_sin_mean_var(tape, rf, vars, HX, HX, cfg.estimator, true),
                                  cfg.gamma3));
    if (cfg.gamma4 > 0)
        obj = add(obj, mul_scalar(detail::mean_feature_dist(tape, HX, HX, cfg.estimator, true),
                                  cfg.gamma4));
    if (cfg.gamma5 > 0)
        obj = add(obj, mul_scalar(rf.freq_norm_penalty_var(tape, vars, HX, HY), cfg.gamma5));
    out.objective = obj;
    return out;
}

inline double kernel_objective_dk(RandomFeatureKernel& rf, const Tensor& X, const Tensor& Y,
                                  const transport::DiscreteMeasure& nu, const GanConfig& cfg) {
    Tape tape;
    Var Xc = tape.constant(X), Yc = tape.constant(Y);
    auto vars = rf.bind(tape);
    auto obj = kernel_objective_dk_var(tape, rf, vars, Xc, Yc, nu, cfg);
    return tape.value(obj.objective).value();
}

// ---- Algorithm-2 style training loop ----

struct EpochRecord {
    int epoch = 0;
    double kernel_objective = 0.0;
    double mmd2_train = 0.0;
    double smmd_sigma = 1.0;
};

struct TrainResult {
    std::vector<EpochRecord> trace;
    bool aborted = false;
    std::string abort_reason;
};

using DataSampler = std::function<Tensor(std::size_t, Rng&)>;

namespace detail {

template <class K, class B>
Var gan_kernel_objective(Tape& tape, const K& kernel, const B& vars, Var Xc, Var Yc,
                         const transport::DiscreteMeasure& nu, const GanConfig& cfg) {
    if constexpr (std::is_same_v<K, DeepRbfKernel>)
        return kernel_objective_rbf_var(tape, kernel, vars, Xc, Yc, nu, cfg).objective;
    else
        return kernel_objective_dk_var(tape, kernel, vars, Xc, Yc, nu, cfg).objective;
}

inline Tensor vstack(const Tensor& A, const Tensor& B) {
    Tensor out = Tensor::zeros({A.rows() + B.rows(), A.cols()});
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t c = 0; c < A.cols(); ++c) out.at(i, c) = A.at(i, c);
    for (std::size_t i = 0; i < B.rows(); ++i)
        for (std::size_t c = 0; c < B.cols(); ++c) out.at(A.rows() + i, c) = B.at(i, c);
    return out;
}

}  // namespace detail

// Alternates kernel-objective updates with generator updates that minimize
// MMD (or SMMD) under the current kernel.
template <class K>
TrainResult train_dgm(const DataSampler& data, Generator& gen, K& kernel, const GanConfig& cfg,
                      Rng& rng) {
    cfg.validate();
    TrainResult out;
    autodiff::AdamState adam_gen, adam_kernel;
    adam_gen.lr = cfg.lr_gen;
    adam_gen.beta1 = cfg.adam_beta1;
    adam_gen.beta2 = cfg.adam_beta2;
    adam_kernel.lr = cfg.lr_kernel;
    adam_kernel.beta1 = cfg.adam_beta1;
    adam_kernel.beta2 = cfg.adam_beta2;
    std::size_t n = cfg.batch_size;

    constexpr bool is_rbf = std::is_same_v<K, DeepRbfKernel>;
    if constexpr (is_rbf) {
        if (cfg.spectral_norm && !cfg.scale_kernel_objective)
            kernels::spectral_normalize_mlp(kernel.params, kernel.prefix, kernel.spec,
                                            cfg.spectral_power_iters, cfg.spectral_post_scale);
    }

    try {
        for (int epoch = 1; epoch <= cfg.generator_steps; ++epoch) {
            EpochRecord rec;
            rec.epoch = epoch;

            for (int j = 0; j < cfg.kernel_steps; ++j) {
                Tensor X = data(n, rng);
                Tensor Y = gen.sample(n, rng);
                Tensor pooled = detail::vstack(X, Y);
                for (int k = 0; k < cfg.jko_steps; ++k) {
                    auto nu = hklearn::normalized_kde(kernel, pooled);
                    for (int a = 0; a < cfg.kernel_inner_adam; ++a) {
                        Tape tape;
                        Var Xc = tape.constant(X), Yc = tape.constant(Y);
                        auto vars = kernel.bind(tape);
                        Var obj = detail::gan_kernel_objective(tape, kernel, vars, Xc, Yc, nu,
                                                               cfg);
                        rec.kernel_objective = tape.value(obj).value();
                        tape.backward(obj);
                        autodiff::collect_grads(tape, kernel.params);
                        autodiff::adam_step(kernel.params, adam_kernel);
                    }
                }
                if constexpr (is_rbf) {
                    if (cfg.spectral_norm && !cfg.scale_kernel_objective)
                        kernels::spectral_normalize_mlp(kernel.params, kernel.prefix,
                                                        kernel.spec, cfg.spectral_power_iters,
                                                        cfg.spectral_post_scale);
                }
            }

            // generator step under the frozen kernel
            Tensor X = data(n, rng);
            Tensor Z = gen.noise_batch(n, rng);
            double sigma = 1.0;
            if (cfg.loss == GanLoss::smmd) sigma = smmd_sigma(kernel, X, cfg.zeta);
            rec.smmd_sigma = sigma;

            Tape tape;
            Var Zc = tape.constant(Z);
            auto gvars = autodiff::bind_mlp(tape, gen.params, gen.prefix, gen.spec);
            Var Yv = autodiff::mlp_apply(gen.spec, gvars, Zc);
            Var Xc = tape.constant(X);
            Var loss{};
            if constexpr (is_rbf) {
                auto kvars = kernel.bind_const(tape);
                Var HX = kernel.features_var(kvars, Xc);
                Var HY = kernel.features_var(kvars, Yv);
                Var Gxx = kernel.gram_from_features(HX, HX);
                Var Gyy = kernel.gram_from_features(HY, HY);
                Var Gxy = kernel.gram_from_features(HX, HY);
                loss = mmd2_var(tape, Gxx, Gyy, Gxy, cfg.gen_estimator);
            } else {
                Tape* tp = &tape;
                K kc = kernel;  // bind a const copy of the kernel parameters
                auto kvars = kc.bind(*tp);
                Var Gxx = kc.gram_var(tape, kvars, Xc, Xc);
                Var Gyy = kc.gram_var(tape, kvars, Yv, Yv);
                Var Gxy = kc.gram_var(tape, kvars, Xc, Yv);
                loss = mmd2_var(tape, Gxx, Gyy, Gxy, cfg.gen_estimator);
            }
            if (sigma != 1.0) loss = autodiff::mul_scalar(loss, sigma);
            rec.mmd2_train = tape.value(loss).value() / sigma;
            tape.backward(loss);
            autodiff::collect_grads(tape, gen.params);
            autodiff::adam_step(gen.params, adam_gen);

            out.trace.push_back(rec);
        }
    } catch (const std::exception& e) {
        out.aborted = true;
        out.abort_reason = e.what();
    }
    return out;
}

// 8-gaussian ring sampler, the standard 2-D mode-coverage target
inline DataSampler ring_sampler(double radius = 2.0, double stddev = 0.2,
                                std::size_t modes = 8) {
    return [radius, stddev, modes](std::size_t n, Rng& rng) {
        Tensor X = Tensor::zeros({n, 2});
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t m = rng.below(modes);
            double ang = 2.0 * 3.14159265358979323846 * double(m) / double(modes);
            X.at(i, 0) = radius * std::cos(ang) + stddev * rng.normal();
            X.at(i, 1) = radius * std::sin(ang) + stddev * rng.normal();
        }
        return X;
    };
}

inline DataSampler gaussian_sampler(std::vector<double> mean, double stddev) {
    auto mu = std::make_shared<std::vector<double>>(std::move(mean));
    return [mu, stddev](std::size_t n, Rng& rng) {
        Tensor X = Tensor::zeros({n, mu->size()});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < mu->size(); ++c)
                X.at(i, c) = (*mu)[c] + stddev * rng.normal();
        return X;
    };
}

}  // namespace hk::genmodel

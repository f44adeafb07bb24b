#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hk/autodiff.hpp"
#include "hk/nn.hpp"
#include "hk/rng.hpp"
#include "hk/tensor.hpp"

namespace hk::kernels {

using autodiff::Activation;
using autodiff::MlpSpec;
using autodiff::MlpVars;
using autodiff::ParamStore;
using autodiff::Tape;
using autodiff::Var;

// n x m matrix of kernel evaluations; when the diagonal is excluded its
// entries are zeroed and off-diagonal means use the n(n-1) count.
struct GramMatrix {
    Tensor K;
    bool diag_excluded = false;

    double offdiag_mean() const {
        std::size_t n = K.rows(), m = K.cols();
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                if (i != j) s += K.at(i, j);
        if (n * m <= 1 || (n == m && n <= 1)) return 0.0;
        std::size_t cnt = (n == m) ? n * (n - 1) : n * m;
        return s / double(cnt);
    }
    double mean() const {
        double s = 0.0;
        for (double v : K.data) s += v;
        return s / double(K.numel());
    }
};

// ---- deep RBF kernel: exp(-||h(x0) - h(x)||^2) ----

struct DeepRbfKernel {
    MlpSpec spec;
    ParamStore params;
    std::string prefix = "h";

    static DeepRbfKernel create(MlpSpec spec, std::uint64_t seed) {
        DeepRbfKernel k;
        k.spec = std::move(spec);
        Rng rng(seed);
        autodiff::init_mlp(k.params, k.prefix, k.spec, rng);
        return k;
    }

    std::size_t input_dim() const { return spec.input_dim(); }
    std::size_t output_dim() const { return spec.output_dim(); }

    Tensor features(const Tensor& X) const {
        return autodiff::plain_mlp_apply(params, prefix, spec, X);
    }

    double eval(std::span<const double> x0, std::span<const double> x) const {
        Tensor in = Tensor::zeros({2, x0.size()});
        for (std::size_t k = 0; k < x0.size(); ++k) {
            in.at(0, k) = x0[k];
            in.at(1, k) = x[k];
        }
        Tensor H = features(in);
        double v = std::exp(-sqdist(H.row_span(0), H.row_span(1)));
        if (!std::isfinite(v)) throw std::runtime_error("deep_rbf_eval: non-finite");
        return v;
    }

    MlpVars bind(Tape& tape) { return autodiff::bind_mlp(tape, params, prefix, spec); }

    // parameters as constants, for optimizing over other quantities
    MlpVars bind_const(Tape& tape) const {
        MlpVars m;
        for (std::size_t l = 0; l < spec.layers(); ++l) {
            m.W.push_back(tape.constant(params.get(prefix + ".W" + std::to_string(l))));
            m.b.push_back(tape.constant(params.get(prefix + ".b" + std::to_string(l))));
        }
        return m;
    }

    Var features_var(const MlpVars& vars, Var X) const {
        return autodiff::mlp_apply(spec, vars, X);
    }

    Var gram_from_features(Var HX, Var HY) const {
        return autodiff::exp(autodiff::neg(autodiff::pairwise_sqdist(HX, HY)));
    }

    Var gram_var(const MlpVars& vars, Var X, Var Y) const {
        Var HX = features_var(vars, X);
        Var HY = features_var(vars, Y);
        return gram_from_features(HX, HY);
    }
};

inline double deep_rbf_eval(const DeepRbfKernel& k, std::span<const double> x0,
                            std::span<const double> x) {
    return k.eval(x0, x);
}

// ---- random-feature kernel (two cosine expectations, averaged) ----
//
// k(x0, x) = mix1 * E_w[cos(w' (h(x0)-h(x)))] + mix2 * E_w[cos(w_pair' (h(x0)-h(x)))]
// where the global frequencies come from a noise -> frequency net and the
// pairwise ones additionally see both feature vectors. Evaluation averages
// both argument orders so the kernel is exactly symmetric.
struct RandomFeatureKernel {
    MlpSpec feat_spec;
    MlpSpec freq_global_spec;
    MlpSpec freq_pair_spec;
    ParamStore params;
    std::size_t num_freq = 64;
    std::size_t noise_dim = 4;
    std::uint64_t noise_seed = 1234;
    double mix1 = 0.5, mix2 = 0.5;

    static RandomFeatureKernel create(std::size_t input_dim, std::size_t feat_out,
                                      std::size_t hidden, std::size_t num_freq,
                                      std::size_t noise_dim, std::uint64_t seed) {
        RandomFeatureKernel k;
        k.num_freq = num_freq;
        k.noise_dim = noise_dim;
        k.noise_seed = seed ^ 0xabcdef12345ULL;
        k.feat_spec = MlpSpec::make({input_dim, hidden, feat_out});
        k.freq_global_spec = MlpSpec::make({noise_dim, hidden, feat_out});
        k.freq_pair_spec = MlpSpec::make({noise_dim + 2 * feat_out, hidden, feat_out});
        Rng rng(seed);
        autodiff::init_mlp(k.params, "h", k.feat_spec, rng);
        autodiff::init_mlp(k.params, "wg", k.freq_global_spec, rng);
        autodiff::init_mlp(k.params, "wp", k.freq_pair_spec, rng);
        // The pairwise frequency net starts out blind to the pair features
        // (frequency depends on noise only), which keeps freshly initialized
        // Gram matrices inside the PSD family; pair dependence is learned.
        Tensor& W0 = k.params.get("wp.W0");
        for (std::size_t r = noise_dim; r < W0.rows(); ++r)
            for (std::size_t c = 0; c < W0.cols(); ++c) W0.at(r, c) = 0.0;
        return k;
    }

    Tensor noise() const {
        Rng rng(noise_seed);
        Tensor Z = Tensor::zeros({num_freq, noise_dim});
        for (auto& v : Z.data) v = rng.normal();
        return Z;
    }

    Tensor features(const Tensor& X) const {
        return autodiff::plain_mlp_apply(params, "h", feat_spec, X);
    }

    struct Terms {
        double term1 = 0.0;       // global-frequency cosine expectation
        double term2_sym = 0.0;   // pairwise-frequency expectation, order-averaged
        double value = 0.0;
    };

    Terms eval_terms(std::span<const double> x0, std::span<const double> x) const {
        if (num_freq < 1) throw std::invalid_argument("random_feature_eval: num_freq >= 1");
        Tensor in = Tensor::zeros({2, x0.size()});
        for (std::size_t k = 0; k < x0.size(); ++k) {
            in.at(0, k) = x0[k];
            in.at(1, k) = x[k];
        }
        Tensor H = features(in);
        std::size_t p = H.cols();
        std::vector<double> delta(p);
        for (std::size_t k = 0; k < p; ++k) delta[k] = H.at(0, k) - H.at(1, k);

        Tensor Z = noise();
        Tensor Wg = autodiff::plain_mlp_apply(params, "wg", freq_global_spec, Z);
        double t1 = 0.0;
        for (std::size_t l = 0; l < num_freq; ++l) {
            double d = 0.0;
            for (std::size_t k = 0; k < p; ++k) d += Wg.at(l, k) * delta[k];
            t1 += std::cos(std::fabs(d));
        }
        t1 /= double(num_freq);

        auto pair_term = [&](std::size_t a, std::size_t b) {
            // frequencies conditioned on the ordered feature pair (a, b)
            Tensor in2 = Tensor::zeros({num_freq, noise_dim + 2 * p});
            for (std::size_t l = 0; l < num_freq; ++l) {
                for (std::size_t k = 0; k < noise_dim; ++k) in2.at(l, k) = Z.at(l, k);
                for (std::size_t k = 0; k < p; ++k) {
                    in2.at(l, noise_dim + k) = H.at(a, k);
                    in2.at(l, noise_dim + p + k) = H.at(b, k);
                }
            }
            Tensor Wp = autodiff::plain_mlp_apply(params, "wp", freq_pair_spec, in2);
            double s = 0.0;
            for (std::size_t l = 0; l < num_freq; ++l) {
                double d = 0.0;
                for (std::size_t k = 0; k < p; ++k)
                    d += Wp.at(l, k) * (H.at(a, k) - H.at(b, k));
                s += std::cos(std::fabs(d));
            }
            return s / double(num_freq);
        };

        Terms out;
        out.term1 = t1;
        out.term2_sym = 0.5 * (pair_term(0, 1) + pair_term(1, 0));
        out.value = mix1 * out.term1 + mix2 * out.term2_sym;
        if (!std::isfinite(out.value))
            throw std::runtime_error("random_feature_eval: non-finite");
        return out;
    }

    double eval(std::span<const double> x0, std::span<const double> x) const {
        return eval_terms(x0, x).value;
    }

    struct BoundVars {
        MlpVars feat, freq_global, freq_pair;
    };

    BoundVars bind(Tape& tape) {
        BoundVars b;
        b.feat = autodiff::bind_mlp(tape, params, "h", feat_spec);
        b.freq_global = autodiff::bind_mlp(tape, params, "wg", freq_global_spec);
        b.freq_pair = autodiff::bind_mlp(tape, params, "wp", freq_pair_spec);
        return b;
    }

    Var features_var(const BoundVars& vars, Var X) const {
        return autodiff::mlp_apply(feat_spec, vars.feat, X);
    }

    // Gram on the tape; trig selects cos (kernel) or sin (the k_sin of the
    // Taylor-bound objective for this family).
    Var gram_var(Tape& tape, const BoundVars& vars, Var X, Var Y, bool use_sin = false) const {
        Var HX = features_var(vars, X);
        Var HY = features_var(vars, Y);
        return gram_from_features_var(tape, vars, HX, HY, use_sin);
    }

    Var gram_from_features_var(Tape& tape, const BoundVars& vars, Var HX, Var HY,
                               bool use_sin = false) const;

    // mean_{rows,freqs} ||w_global|| + ||w_pair|| + ||d w_pair / d h(x)||_F,
    // the Appendix-style frequency-magnitude regularizer
    Var freq_norm_penalty_var(Tape& tape, const BoundVars& vars, Var HX, Var HY) const;
};

// ---- plain gram assembly ----

using KernelFn = std::function<double(std::span<const double>, std::span<const double>)>;

inline GramMatrix gram(const KernelFn& kernel, const Tensor& X, const Tensor& Y,
                       bool exclude_diag = false) {
    if (X.numel() == 0 || Y.numel() == 0) throw std::invalid_argument("gram: empty input");
    std::size_t n = X.rows(), m = Y.rows();
    GramMatrix g;
    g.K = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            g.K.at(i, j) = kernel(X.row_span(i), Y.row_span(j));
    bool same = (n == m) && (X.data == Y.data);
    if (exclude_diag && same) {
        for (std::size_t i = 0; i < n; ++i) g.K.at(i, i) = 0.0;
        g.diag_excluded = true;
    }
    check_finite(g.K, "gram");
    return g;
}

// fast path: one batched feature pass instead of n*m network evaluations
inline GramMatrix gram(const DeepRbfKernel& k, const Tensor& X, const Tensor& Y,
                       bool exclude_diag = false) {
    if (X.numel() == 0 || Y.numel() == 0) throw std::invalid_argument("gram: empty input");
    std::size_t n = X.rows(), m = Y.rows();
    Tensor HX = k.features(X);
    bool same = (n == m) && (X.data == Y.data);
    Tensor HY = same ? HX : k.features(Y);
    GramMatrix g;
    g.K = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            g.K.at(i, j) = std::exp(-sqdist(HX.row_span(i), HY.row_span(j)));
    if (exclude_diag && same) {
        for (std::size_t i = 0; i < n; ++i) g.K.at(i, i) = 0.0;
        g.diag_excluded = true;
    }
    check_finite(g.K, "gram");
    return g;
}

inline GramMatrix gram(const RandomFeatureKernel& k, const Tensor& X, const Tensor& Y,
                       bool exclude_diag = false) {
    KernelFn fn = [&k](std::span<const double> a, std::span<const double> b) {
        return k.eval(a, b);
    };
    return gram(fn, X, Y, exclude_diag);
}

// ---- spectral normalization ----

struct SpectralNormResult {
    Tensor W;
    double estimate = 0.0;
    bool zero_matrix = false;
};

// Divides W by a power-iteration estimate of its largest singular value,
// then applies an optional rescale (the "scale the weights by 2" option).
inline SpectralNormResult spectral_normalize(const Tensor& W, int power_iters,
                                             double post_scale = 1.0) {
    if (power_iters < 1) throw std::invalid_argument("spectral_normalize: power_iters >= 1");
    if (W.rank() != 2) throw std::invalid_argument("spectral_normalize: matrix required");
    std::size_t r = W.rows(), c = W.cols();
    double frob = 0.0;
    for (double v : W.data) frob += v * v;
    if (frob == 0.0) return SpectralNormResult{W, 0.0, true};

    std::vector<double> v(c, 1.0 / std::sqrt(double(c)));
    std::vector<double> u(r, 0.0);
    double sigma = 0.0;
    for (int it = 0; it < power_iters; ++it) {
        for (std::size_t i = 0; i < r; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += W.at(i, j) * v[j];
            u[i] = s;
        }
        double nu = 0.0;
        for (double x : u) nu += x * x;
        nu = std::sqrt(nu);
        if (nu == 0.0) break;
        for (auto& x : u) x /= nu;
        for (std::size_t j = 0; j < c; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < r; ++i) s += W.at(i, j) * u[i];
            v[j] = s;
        }
        double nv = 0.0;
        for (double x : v) nv += x * x;
        nv = std::sqrt(nv);
        if (nv == 0.0) break;
        for (auto& x : v) x /= nv;
        sigma = nv;
    }
    if (sigma <= 0.0) return SpectralNormResult{W, 0.0, true};
    SpectralNormResult out;
    out.W = W;
    for (auto& x : out.W.data) x = x / sigma * post_scale;
    out.estimate = sigma;
    return out;
}

// Normalizes every weight matrix of one MLP in place.
inline void spectral_normalize_mlp(ParamStore& store, const std::string& prefix,
                                   const MlpSpec& spec, int power_iters,
                                   double post_scale = 1.0) {
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        Tensor& W = store.get(prefix + ".W" + std::to_string(l));
        auto res = spectral_normalize(W, power_iters, post_scale);
        if (!res.zero_matrix) W = res.W;
    }
}

// ---- random-feature gram on the tape ----

namespace detail {

// rows of the output enumerate (i, j, l): [z_l | HX_i | HY_j]
inline Var build_pair_inputs(Tape& tape, Var HX, Var HY, const Tensor& Z) {
    const Tensor &hx = tape.value(HX), &hy = tape.value(HY);
    std::size_t n = hx.rows(), m = hy.rows(), p = hx.cols();
    std::size_t L = Z.rows(), q = Z.cols();
    auto compute = [n, m, p, L, q, Z](const Tensor& hx, const Tensor& hy, Tensor& out) {
        if (out.rank() != 2 || out.rows() != n * m * L) out = Tensor::zeros({n * m * L, q + 2 * p});
        std::size_t r = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t l = 0; l < L; ++l, ++r) {
                    for (std::size_t k = 0; k < q; ++k) out.at(r, k) = Z.at(l, k);
                    for (std::size_t k = 0; k < p; ++k) {
                        out.at(r, q + k) = hx.at(i, k);
                        out.at(r, q + p + k) = hy.at(j, k);
                    }
                }
    };
    auto fwd = [xi = HX.id, yi = HY.id, compute](Tape& tp, autodiff::Node& nd) {
        compute(tp.node(xi).value, tp.node(yi).value, nd.value);
    };
    auto bwd = [xi = HX.id, yi = HY.id, n, m, p, L, q](Tape& tp, autodiff::Node& nd) {
        bool gx = tp.node(xi).requires_grad, gy = tp.node(yi).requires_grad;
        Tensor* dx = gx ? &tp.ensure_grad(xi) : nullptr;
        Tensor* dy = gy ? &tp.ensure_grad(yi) : nullptr;
        std::size_t r = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t l = 0; l < L; ++l, ++r)
                    for (std::size_t k = 0; k < p; ++k) {
                        if (gx) dx->at(i, k) += nd.grad.at(r, q + k);
                        if (gy) dy->at(j, k) += nd.grad.at(r, q + p + k);
                    }
    };
    Tensor out;
    compute(hx, hy, out);
    return tape.emit(std::move(out), {HX.id, HY.id}, fwd, bwd);
}

// rows enumerate (i, j, l): HX_i - HY_j (the frequency-sample axis just
// replicates the difference)
inline Var expand_pair_diff(Tape& tape, Var HX, Var HY, std::size_t L) {
    const Tensor &hx = tape.value(HX), &hy = tape.value(HY);
    std::size_t n = hx.rows(), m = hy.rows(), p = hx.cols();
    auto compute = [n, m, p, L](const Tensor& hx, const Tensor& hy, Tensor& out) {
        if (out.rank() != 2 || out.rows() != n * m * L) out = Tensor::zeros({n * m * L, p});
        std::size_t r = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t l = 0; l < L; ++l, ++r)
                    for (std::size_t k = 0; k < p; ++k)
                        out.at(r, k) = hx.at(i, k) - hy.at(j, k);
    };
    auto fwd = [xi = HX.id, yi = HY.id, compute](Tape& tp, autodiff::Node& nd) {
        compute(tp.node(xi).value, tp.node(yi).value, nd.value);
    };
    auto bwd = [xi = HX.id, yi = HY.id, n, m, p, L](Tape& tp, autodiff::Node& nd) {
        bool gx = tp.node(xi).requires_grad, gy = tp.node(yi).requires_grad;
        Tensor* dx = gx ? &tp.ensure_grad(xi) : nullptr;
        Tensor* dy = gy ? &tp.ensure_grad(yi) : nullptr;
        std::size_t r = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t l = 0; l < L; ++l, ++r)
                    for (std::size_t k = 0; k < p; ++k) {
                        if (gx) dx->at(i, k) += nd.grad.at(r, k);
                        if (gy) dy->at(j, k) -= nd.grad.at(r, k);
                    }
    };
    Tensor out;
    compute(hx, hy, out);
    return tape.emit(std::move(out), {HX.id, HY.id}, fwd, bwd);
}

// (n*m*L) vector -> (n x m) matrix of per-pair means over the L axis
inline Var group_mean(Tape& tape, Var v, std::size_t n, std::size_t m, std::size_t L) {
    auto compute = [n, m, L](const Tensor& x, Tensor& out) {
        if (out.rank() != 2 || out.rows() != n || out.cols() != m) out = Tensor::zeros({n, m});
        std::size_t r = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                double s = 0.0;
                for (std::size_t l = 0; l < L; ++l, ++r) s += x.data[r];
                out.at(i, j) = s / double(L);
            }
    };
    auto fwd = [vi = v.id, compute](Tape& tp, autodiff::Node& nd) {
        compute(tp.node(vi).value, nd.value);
    };
    auto bwd = [vi = v.id, n, m, L](Tape& tp, autodiff::Node& nd) {
        if (!tp.node(vi).requires_grad) return;
        Tensor& dv = tp.ensure_grad(vi);
        std::size_t r = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                double g = nd.grad.at(i, j) / double(L);
                for (std::size_t l = 0; l < L; ++l, ++r) dv.data[r] += g;
            }
    };
    const Tensor& x = tape.value(v);
    Tensor out;
    compute(x, out);
    return tape.emit(std::move(out), {v.id}, fwd, bwd);
}

}  // namespace detail

inline Var RandomFeatureKernel::gram_from_features_var(Tape& tape, const BoundVars& vars,
                                                       Var HX, Var HY, bool use_sin) const {
    using namespace autodiff;
    const Tensor &hx = tape.value(HX), &hy = tape.value(HY);
    std::size_t n = hx.rows(), m = hy.rows();
    std::size_t L = num_freq;
    Tensor Z = noise();
    Var Zc = tape.constant(Z);

    // global term: project both feature sets on the sampled frequencies
    Var Omega = mlp_apply(freq_global_spec, vars.freq_global, Zc);  // L x p
    Var PX = matmul(HX, transpose(Omega));                          // n x L
    Var PY = matmul(HY, transpose(Omega));                          // m x L
    // cos(a - b) pairwise over the L axis via the expanded difference
    Var DP = detail::expand_pair_diff(tape, PX, PY, 1);             // (n*m) x L
    Var T1v = use_sin ? sin(DP) : cos(DP);
    Var term1 = detail::group_mean(tape, mul_scalar(rowsum(T1v), 1.0 / double(L)), n, m, 1);

    // pairwise term, both argument orders
    auto ordered = [&](Var HA, Var HB, std::size_t na, std::size_t nb) {
        Var B = detail::build_pair_inputs(tape, HA, HB, Z);              // (na*nb*L) x (q+2p)
        Var Wp = mlp_apply(freq_pair_spec, vars.freq_pair, B);           // rows x p
        Var D = detail::expand_pair_diff(tape, HA, HB, L);               // rows x p
        Var s = rowsum(mul(Wp, D));                                      // rows
        Var tv = use_sin ? sin(s) : cos(s);
        return detail::group_mean(tape, tv, na, nb, L);                  // na x nb
    };
    Var t2_xy = ordered(HX, HY, n, m);
    Var t2_yx = ordered(HY, HX, m, n);
    Var term2 = mul_scalar(add(t2_xy, transpose(t2_yx)), 0.5);

    return add(mul_scalar(term1, mix1), mul_scalar(term2, mix2));
}

inline Var RandomFeatureKernel::freq_norm_penalty_var(Tape& tape, const BoundVars& vars,
                                                      Var HX, Var HY) const {
    using namespace autodiff;
    const Tensor &hx = tape.value(HX), &hy = tape.value(HY);
    std::size_t n = hx.rows(), m = hy.rows(), p = hx.cols();
    std::size_t L = num_freq, q = noise_dim;
    Tensor Z = noise();
    Var Zc = tape.constant(Z);

    Var Omega = mlp_apply(freq_global_spec, vars.freq_global, Zc);       // L x p
    Var norm_g = mean(sqrt(rowsum(mul(Omega, Omega))));

    Var B = detail::build_pair_inputs(tape, HX, HY, Z);
    Var Wp = mlp_apply(freq_pair_spec, vars.freq_pair, B);
    Var norm_p = mean(sqrt(rowsum(mul(Wp, Wp))));

    // Frobenius norm of d w_pair / d h(x): Jacobian of the pair net with
    // respect to its h(x) input columns, one row at a time
    const Tensor& Bv = tape.value(B);
    std::size_t rows = Bv.rows();
    Var jac_acc = tape.constant(Tensor::scalar(0.0));
    for (std::size_t r = 0; r < rows; ++r) {
        Var row = block(B, r, 1, 0, Bv.cols());
        Var J = mlp_jacobian(freq_pair_spec, vars.freq_pair, row);       // p x (q+2p)
        Var Jx = block(J, 0, p, q, p);
        jac_acc = add(jac_acc, sqrt(sum(mul(Jx, Jx))));
    }
    Var norm_j = mul_scalar(jac_acc, 1.0 / double(rows));
    return add(add(norm_g, norm_p), norm_j);
}

}  // namespace hk::kernels

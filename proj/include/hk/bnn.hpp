#pragma once

#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "hk/autodiff.hpp"
#include "hk/hklearn.hpp"
#include "hk/kernels.hpp"
#include "hk/rng.hpp"
#include "hk/svgd.hpp"
#include "hk/tensor.hpp"

namespace hk::svgd {

inline constexpr double bnn_two_pi = 6.283185307179586476925286766559;

// One hidden layer of relu units; two weight layers in total.
struct BnnSpec {
    std::size_t input_dim = 1;
    std::size_t hidden = 50;
    std::size_t output_dim = 1;
    double prior_scale = 1.0;  // stddev of the isotropic gaussian prior
    double obs_noise = 0.1;    // observation noise stddev
    std::size_t particles = 10;

    void validate() const {
        if (input_dim == 0 || hidden == 0 || output_dim == 0)
            throw std::invalid_argument("BnnSpec: widths positive");
        if (obs_noise <= 0 || prior_scale <= 0)
            throw std::invalid_argument("BnnSpec: scales positive");
    }

    std::size_t weight_count() const {
        return input_dim * hidden + hidden + hidden * output_dim + output_dim;
    }
    // the last weight layer plus its bias
    std::size_t last_layer_offset() const { return input_dim * hidden + hidden; }
};

struct Dataset {
    Tensor X;  // n x d
    std::vector<double> y;

    std::size_t size() const { return y.size(); }
};

inline Dataset make_linear(std::size_t n, double noise, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.X = Tensor::zeros({n, 1});
    d.y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double x = rng.uniform(-3.0, 3.0);
        d.X.at(i, 0) = x;
        d.y[i] = 1.3 * x - 0.4 + noise * rng.normal();
    }
    return d;
}

inline Dataset make_sinusoid(std::size_t n, double noise, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.X = Tensor::zeros({n, 1});
    d.y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double x = rng.uniform(-3.0, 3.0);
        d.X.at(i, 0) = x;
        d.y[i] = std::sin(2.0 * x) + 0.3 * x + noise * rng.normal();
    }
    return d;
}

inline Dataset make_heteroscedastic(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.X = Tensor::zeros({n, 1});
    d.y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double x = rng.uniform(-3.0, 3.0);
        d.X.at(i, 0) = x;
        d.y[i] = std::sin(2.0 * x) + (0.05 + 0.1 * std::fabs(x)) * rng.normal();
    }
    return d;
}

namespace detail {

// flat layout: W0 (in*h) | b0 (h) | W1 (h*out) | b1 (out)
inline std::vector<double> bnn_predict(const BnnSpec& spec, std::span<const double> w,
                                       const Tensor& X) {
    std::size_t in = spec.input_dim, h = spec.hidden, out = spec.output_dim;
    const double* W0 = w.data();
    const double* b0 = W0 + in * h;
    const double* W1 = b0 + h;
    const double* b1 = W1 + h * out;
    std::vector<double> pred(X.rows() * out);
    std::vector<double> hid(h);
    for (std::size_t r = 0; r < X.rows(); ++r) {
        for (std::size_t j = 0; j < h; ++j) {
            double s = b0[j];
            for (std::size_t k = 0; k < in; ++k) s += X.at(r, k) * W0[k * h + j];
            hid[j] = s > 0.0 ? s : 0.0;
        }
        for (std::size_t o = 0; o < out; ++o) {
            double s = b1[o];
            for (std::size_t j = 0; j < h; ++j) s += hid[j] * W1[j * out + o];
            pred[r * out + o] = s;
        }
    }
    return pred;
}

// log posterior and its gradient for one particle, by reverse mode
inline double bnn_log_posterior_grad(const BnnSpec& spec, std::span<const double> w,
                                     const Tensor& X, const std::vector<double>& y,
                                     std::vector<double>* grad_out) {
    using namespace autodiff;
    std::size_t in = spec.input_dim, h = spec.hidden, out = spec.output_dim;
    Tape tape;
    std::size_t off = 0;
    auto slice = [&](std::size_t cnt, std::vector<std::size_t> shape, const char* name) {
        Tensor t(std::move(shape), std::vector<double>(w.begin() + off, w.begin() + off + cnt));
        off += cnt;
        return tape.param(name, std::move(t));
    };
    Var W0 = slice(in * h, {in, h}, "W0");
    Var b0 = slice(h, {h}, "b0");
    Var W1 = slice(h * out, {h, out}, "W1");
    Var b1 = slice(out, {out}, "b1");

    Var Xc = tape.constant(X);
    Var hid = relu(add_rowvec(matmul(Xc, W0), b0));
    Var pred = add_rowvec(matmul(hid, W1), b1);
    Var yc = tape.constant(Tensor::matrix(y.size(), out, std::vector<double>(y)));
    Var resid = sub(pred, yc);
    Var sse = sum(mul(resid, resid));
    double inv2s2 = 1.0 / (2.0 * spec.obs_noise * spec.obs_noise);
    double inv2p2 = 1.0 / (2.0 * spec.prior_scale * spec.prior_scale);
    Var prior = add(add(sum(mul(W0, W0)), sum(mul(b0, b0))),
                    add(sum(mul(W1, W1)), sum(mul(b1, b1))));
    // negative log posterior, minimized; log q is its negation
    Var neg_logq = add(mul_scalar(sse, inv2s2), mul_scalar(prior, inv2p2));
    tape.backward(neg_logq);

    if (grad_out) {
        grad_out->assign(w.size(), 0.0);
        std::size_t pos = 0;
        for (Var v : {W0, b0, W1, b1}) {
            Tensor g = tape.grad(v);
            for (double gv : g.data) (*grad_out)[pos++] = -gv;  // gradient of log q
        }
    }
    return -tape.value(neg_logq).value();
}

}  // namespace detail

struct BnnTrainConfig {
    int iterations = 300;
    SvgdConfig svgd{0.05, true};
    // learned-kernel settings for the last-layer block
    hklearn::HkConfig hk;
    std::size_t feat_hidden = 32;
    std::size_t feat_out = 32;

    BnnTrainConfig() {
        hk.outer_steps = 1;       // m = 1 per the alternating protocol
        hk.inner_opt_steps = 5;   // five Adam updates per solve
        hk.lr = 1e-2;
        hk.sinkhorn_iters = 30;
        hk.lambda = 0.05;
    }
};

struct BnnMetrics {
    std::string method;
    std::uint64_t seed = 0;
    double rmse = 0.0;
    double test_ll = 0.0;
    double wallclock_s = 0.0;
};

// SVGD over BNN weight particles with a 90/10 train/test split. For
// method "hk-svgd" the learned kernel acts on the last-layer weights and the
// median RBF covers the rest, composed as a product over the blocks.
inline BnnMetrics bnn_regression(const Dataset& data, const BnnSpec& spec,
                                 const std::string& method, const BnnTrainConfig& cfg,
                                 std::uint64_t seed) {
    spec.validate();
    if (method != "svgd" && method != "hk-svgd")
        throw std::invalid_argument("bnn_regression: method must be svgd or hk-svgd");
    if (data.size() < 10) throw std::invalid_argument("bnn_regression: dataset too small");
    auto t0 = std::chrono::steady_clock::now();
    Rng rng(seed ^ 0x5eedULL);

    // 90/10 split
    std::size_t n = data.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
    std::size_t n_test = std::max<std::size_t>(1, n / 10);
    std::size_t n_train = n - n_test;
    Dataset train, test;
    train.X = Tensor::zeros({n_train, data.X.cols()});
    test.X = Tensor::zeros({n_test, data.X.cols()});
    for (std::size_t i = 0; i < n_train; ++i) {
        for (std::size_t c = 0; c < data.X.cols(); ++c) train.X.at(i, c) = data.X.at(idx[i], c);
        train.y.push_back(data.y[idx[i]]);
    }
    for (std::size_t i = 0; i < n_test; ++i) {
        for (std::size_t c = 0; c < data.X.cols(); ++c)
            test.X.at(i, c) = data.X.at(idx[n_train + i], c);
        test.y.push_back(data.y[idx[n_train + i]]);
    }

    // particles initialized from scaled gaussians
    std::size_t D = spec.weight_count(), P = spec.particles;
    ParticleSet particles;
    particles.X = Tensor::zeros({P, D});
    double w_scale = std::sqrt(2.0 / double(spec.input_dim + spec.hidden));
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < D; ++k) particles.X.at(p, k) = w_scale * rng.normal();

    TargetDensity target;
    target.log_density = [&spec, &train](std::span<const double> w) {
        return detail::bnn_log_posterior_grad(spec, w, train.X, train.y, nullptr);
    };
    target.grad_log_density = [&spec, &train](std::span<const double> w) {
        std::vector<double> g;
        detail::bnn_log_posterior_grad(spec, w, train.X, train.y, &g);
        return g;
    };

    std::size_t split = spec.last_layer_offset();
    DeepRbfKernel learned;
    if (method == "hk-svgd") {
        auto fs = autodiff::MlpSpec::make({D - split, cfg.feat_hidden, cfg.feat_out});
        learned = DeepRbfKernel::create(fs, seed ^ 0xfeedULL);
    }

    SvgdState state;
    for (int it = 0; it < cfg.iterations; ++it) {
        KernelOps ops;
        if (method == "svgd") {
            ops = rbf_median_ops();
        } else {
            // learn the last-layer kernel on the current particles
            Tensor last = Tensor::zeros({P, D - split});
            for (std::size_t p = 0; p < P; ++p)
                for (std::size_t k = split; k < D; ++k) last.at(p, k - split) = particles.X.at(p, k);
            auto traj = hklearn::heat_kernel_learning(last, learned, cfg.hk, rng);
            if (traj.aborted)
                throw std::runtime_error("bnn_regression: kernel training diverged: " +
                                         traj.abort_reason);
            std::vector<KernelBlock> blocks;
            blocks.push_back(KernelBlock{0, split, rbf_median_ops()});
            blocks.push_back(KernelBlock{split, D, deep_rbf_ops(&learned)});
            ops = product_ops(std::move(blocks));
        }
        particles = svgd_step(particles, target, ops, cfg.svgd, &state);
    }

    // predictive metrics
    std::vector<std::vector<double>> preds(P);
    for (std::size_t p = 0; p < P; ++p)
        preds[p] = detail::bnn_predict(spec, particles.X.row_span(p), test.X);
    double sse = 0.0, ll = 0.0;
    double s2 = spec.obs_noise * spec.obs_noise;
    for (std::size_t i = 0; i < n_test; ++i) {
        double mean_pred = 0.0;
        for (std::size_t p = 0; p < P; ++p) mean_pred += preds[p][i];
        mean_pred /= double(P);
        sse += (mean_pred - test.y[i]) * (mean_pred - test.y[i]);
        // log of the particle-averaged gaussian predictive density
        double mx = -std::numeric_limits<double>::infinity();
        std::vector<double> lps(P);
        for (std::size_t p = 0; p < P; ++p) {
            double d = preds[p][i] - test.y[i];
            lps[p] = -0.5 * std::log(bnn_two_pi * s2) - d * d / (2.0 * s2);
            mx = std::max(mx, lps[p]);
        }
        double acc = 0.0;
        for (double lp : lps) acc += std::exp(lp - mx);
        ll += mx + std::log(acc / double(P));
    }

    BnnMetrics m;
    m.method = method;
    m.seed = seed;
    m.rmse = std::sqrt(sse / double(n_test));
    m.test_ll = ll / double(n_test);
    m.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
}

// closed-form check target: log of the gaussian predictive density for one
// particle and one observation
inline double gaussian_log_density(double y, double mean, double stddev) {
    double d = y - mean;
    return -0.5 * std::log(bnn_two_pi * stddev * stddev) - d * d / (2.0 * stddev * stddev);
}

}  // namespace hk::svgd

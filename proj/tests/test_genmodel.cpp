#include <doctest.h>

#include <cmath>

#include "hk/genmodel.hpp"
#include "hk/rng.hpp"
#include "test_util.hpp"

using namespace hk;
using namespace hk::genmodel;
using hk::autodiff::Activation;
using hk::autodiff::MlpSpec;
using hk::autodiff::Tape;
using hk::autodiff::Var;
using hk::kernels::DeepRbfKernel;
using hk::kernels::RandomFeatureKernel;

namespace {

DeepRbfKernel identity_kernel(std::size_t d) {
    MlpSpec spec = MlpSpec::make({d, d}, Activation::identity, Activation::identity);
    DeepRbfKernel k;
    k.spec = spec;
    Tensor W = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < d; ++i) W.at(i, i) = 1.0;
    k.params.add("h.W0", W);
    k.params.add("h.b0", Tensor::zeros({d}));
    return k;
}

DeepRbfKernel const_kernel(std::size_t d) {
    MlpSpec spec = MlpSpec::make({d, 2}, Activation::identity, Activation::identity);
    DeepRbfKernel k;
    k.spec = spec;
    k.params.add("h.W0", Tensor::zeros({d, 2}));
    k.params.add("h.b0", Tensor::zeros({2}));
    return k;
}

// direct double-sum oracle over explicit kernel evaluations
template <class K>
double mmd2_direct(const K& kernel, const Tensor& X, const Tensor& Y, bool biased) {
    std::size_t n = X.rows(), m = Y.rows();
    double xx = 0, yy = 0, xy = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (biased || i != j) xx += kernel.eval(X.row_span(i), X.row_span(j));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
            if (biased || i != j) yy += kernel.eval(Y.row_span(i), Y.row_span(j));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) xy += kernel.eval(X.row_span(i), Y.row_span(j));
    double cx = biased ? double(n * n) : double(n * (n - 1));
    double cy = biased ? double(m * m) : double(m * (m - 1));
    return xx / cx + yy / cy - 2.0 * xy / double(n * m);
}

transport::DiscreteMeasure pooled_nu(DeepRbfKernel& k, const Tensor& X, const Tensor& Y) {
    Tensor pooled = Tensor::zeros({X.rows() + Y.rows(), X.cols()});
    for (std::size_t i = 0; i < X.rows(); ++i)
        for (std::size_t c = 0; c < X.cols(); ++c) pooled.at(i, c) = X.at(i, c);
    for (std::size_t j = 0; j < Y.rows(); ++j)
        for (std::size_t c = 0; c < X.cols(); ++c) pooled.at(X.rows() + j, c) = Y.at(j, c);
    return hklearn::normalized_kde(k, pooled);
}

}  // namespace

TEST_CASE("mmd2: identical batches give exactly zero under the biased estimator") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 6, 3}), 1);
    Rng rng(2);
    Tensor X = Tensor::matrix(5, 2, rng.normal_vec(10));
    CHECK(mmd2(k, X, X, MmdEstimator::biased) == 0.0);
}

TEST_CASE("mmd2: two diracs in closed form") {
    DeepRbfKernel k = identity_kernel(1);
    for (double d : {0.5, 1.0, 2.0}) {
        Tensor X = Tensor::matrix(1, 1, {0.0});
        Tensor Y = Tensor::matrix(1, 1, {d});
        double want = 2.0 - 2.0 * std::exp(-d * d);
        CHECK(mmd2(k, X, Y, MmdEstimator::biased) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("mmd2: double-sum oracle on random batches, both estimators") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 8, 4}), 0);
    Rng rng(3);
    Tensor X = Tensor::matrix(4, 2, rng.normal_vec(8));
    Tensor Y = Tensor::matrix(4, 2, rng.normal_vec(8, 1.5));
    CHECK(mmd2(k, X, Y, MmdEstimator::biased) ==
          doctest::Approx(mmd2_direct(k, X, Y, true)).epsilon(1e-12));
    CHECK(mmd2(k, X, Y, MmdEstimator::unbiased) ==
          doctest::Approx(mmd2_direct(k, X, Y, false)).epsilon(1e-12));
}

TEST_CASE("mmd2: unbiased estimator requires two samples per batch") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({1, 4, 2}), 4);
    Tensor X = Tensor::matrix(1, 1, {0.0});
    Tensor Y = Tensor::matrix(3, 1, {1.0, 2.0, 3.0});
    CHECK_THROWS(mmd2(k, X, Y, MmdEstimator::unbiased));
}

TEST_CASE("smmd2: constant kernel halves the mmd at zeta = 1") {
    DeepRbfKernel k = const_kernel(1);
    Rng rng(5);
    Tensor X = Tensor::matrix(3, 1, rng.normal_vec(3));
    Tensor Y = Tensor::matrix(3, 1, rng.normal_vec(3));
    double sigma = 0.0;
    double s = smmd2(k, X, Y, 1.0, MmdEstimator::biased, &sigma);
    CHECK(sigma == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s == doctest::Approx(0.5 * mmd2(k, X, Y, MmdEstimator::biased)).epsilon(1e-12));
}

TEST_CASE("smmd2: identity features in d = 1 give the analytic trace") {
    DeepRbfKernel k = identity_kernel(1);
    Rng rng(6);
    Tensor X = Tensor::matrix(4, 1, rng.normal_vec(4));
    Tensor Y = Tensor::matrix(4, 1, rng.normal_vec(4));
    for (double zeta : {0.5, 1.0, 2.0}) {
        double sigma = 0.0;
        smmd2(k, X, Y, zeta, MmdEstimator::biased, &sigma);
        CHECK(sigma == doctest::Approx(1.0 / (zeta + 1.0 + 2.0)).epsilon(1e-10));
        CHECK(sigma > 0.0);
        CHECK(sigma <= 1.0 / zeta + 1e-12);
    }
}

TEST_CASE("smmd2: identical batches stay zero and sigma matches the stencil") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 6, 3}), 7);
    Rng rng(8);
    Tensor X = Tensor::matrix(4, 2, rng.normal_vec(8));
    CHECK(smmd2(k, X, X, 1.0, MmdEstimator::biased) == 0.0);

    // sigma from the finite-difference stencil agrees with the closed form
    RandomFeatureKernel rf = RandomFeatureKernel::create(2, 3, 6, 16, 2, 9);
    double s1 = smmd_sigma(rf, X, 1.0);
    CHECK(s1 > 0.0);
    CHECK(s1 <= 1.0 + 1e-9);
    double s2 = smmd_sigma(k, X, 1.0);
    auto fn = [&k](std::span<const double> a, std::span<const double> b) {
        return k.eval(a, b);
    };
    double tr = 0.0;
    for (std::size_t i = 0; i < X.rows(); ++i)
        tr += autodiff::hessian_trace_cross(fn, X.row_span(i));
    tr /= double(X.rows());
    CHECK(s2 == doctest::Approx(1.0 / (1.0 + 1.0 + tr)).epsilon(1e-3));
}

TEST_CASE("pair expectation: constant kernel gives the constant") {
    DeepRbfKernel k = const_kernel(2);  // kernel identically one
    Rng rng(10);
    Tensor X = Tensor::matrix(3, 2, rng.normal_vec(6));
    Tensor Y = Tensor::matrix(4, 2, rng.normal_vec(8));
    CHECK(pair_expectation(k, X, Y, MmdEstimator::biased) ==
          doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("pair expectation: single shared pair expands directly") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({1, 6, 3}), 11);
    Tensor X = Tensor::matrix(1, 1, {0.4});
    Tensor Y = Tensor::matrix(1, 1, {-0.9});
    double kxy = k.eval(X.row_span(0), Y.row_span(0));
    // biased same-set means are k(x,x) = k(y,y) = 1
    double want = 0.25 * (1.0 + 2.0 * kxy + 1.0);
    CHECK(pair_expectation(k, X, Y, MmdEstimator::biased) ==
          doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("pair expectation: quarter-weighted pooled double sum") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 8, 4}), 0);
    Rng rng(12);
    Tensor X = Tensor::matrix(3, 2, rng.normal_vec(6));
    Tensor Y = Tensor::matrix(3, 2, rng.normal_vec(6));
    double qq = 0, pq = 0, pp = 0;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            qq += k.eval(Y.row_span(j), Y.row_span(i));
            pp += k.eval(X.row_span(j), X.row_span(i));
            pq += k.eval(Y.row_span(j), X.row_span(i));
        }
    double want = 0.25 * (qq / 9.0 + 2.0 * pq / 9.0 + pp / 9.0);
    CHECK(pair_expectation(k, X, Y, MmdEstimator::biased) ==
          doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("taylor bound: vanishes only when the feature gap vanishes") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 8, 4}), 13);
    std::vector<double> x = {0.3, -0.5};
    auto same = taylor_bound_rbf(k, x, x);
    CHECK(same.value == 0.0);
    CHECK(same.feature_dist == 0.0);

    std::vector<double> y = {1.0, 0.7};
    auto tb = taylor_bound_rbf(k, x, y);
    CHECK(tb.value > 0.0);
    CHECK(tb.value ==
          doctest::Approx(tb.kernel_value * tb.jacobian_frob * tb.feature_dist).epsilon(1e-12));
}

TEST_CASE("taylor bound: identity-feature closed form") {
    std::size_t d = 3;
    DeepRbfKernel k = identity_kernel(d);
    std::vector<double> x = {0.1, 0.2, -0.4}, y = {0.5, -0.3, 0.2};
    auto tb = taylor_bound_rbf(k, x, y);
    double dist = std::sqrt(hk::sqdist(std::span<const double>(x), std::span<const double>(y)));
    double want = std::exp(-dist * dist) * std::sqrt(double(d)) * dist;
    CHECK(tb.value == doctest::Approx(want).epsilon(1e-10));
    CHECK(tb.jacobian_frob == doctest::Approx(std::sqrt(double(d))).epsilon(1e-10));
}

TEST_CASE("taylor bound: components match independent references") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 6, 3}), 0);
    std::vector<double> x = {0.3, 0.8}, y = {-0.6, 0.1};
    auto tb = taylor_bound_rbf(k, x, y);
    CHECK(tb.kernel_value == doctest::Approx(k.eval(y, x)).epsilon(1e-12));
    // jacobian frobenius norm against finite differences of the features
    double h = 1e-6;
    double fro2 = 0.0;
    for (std::size_t c = 0; c < 2; ++c) {
        auto up = x, dn = x;
        up[c] += h;
        dn[c] -= h;
        Tensor Xu = Tensor::matrix(1, 2, up), Xd = Tensor::matrix(1, 2, dn);
        Tensor fu = k.features(Xu), fd = k.features(Xd);
        for (std::size_t r = 0; r < fu.numel(); ++r) {
            double dj = (fu.data[r] - fd.data[r]) / (2 * h);
            fro2 += dj * dj;
        }
    }
    CHECK(tb.jacobian_frob == doctest::Approx(std::sqrt(fro2)).epsilon(1e-5));
}

TEST_CASE("kernel objective rbf: mmd-gan reduction identity (flagship)") {
    Rng rng(14);
    for (auto est : {MmdEstimator::biased, MmdEstimator::unbiased}) {
        for (int rep = 0; rep < 3; ++rep) {
            DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 8, 4}), rng.next_u64());
            Tensor X = Tensor::matrix(5, 2, rng.normal_vec(10));
            Tensor Y = Tensor::matrix(5, 2, rng.normal_vec(10, 1.3));
            GanConfig cfg;
            cfg.alpha = cfg.beta = cfg.gamma2 = cfg.gamma3 = cfg.gamma4 = 0.0;
            cfg.gamma1 = 4.0;
            cfg.lambda = 4.0;
            cfg.estimator = est;
            cfg.scale_kernel_objective = false;
            auto nu = pooled_nu(k, X, Y);
            double obj = kernel_objective_rbf(k, X, Y, nu, cfg);
            double want = -mmd2(k, X, Y, est);
            CHECK(std::fabs(obj - want) < 1e-9);
        }
    }
}

TEST_CASE("kernel objective rbf: repulsive-family reduction") {
    Rng rng(15);
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 8, 4}), 16);
    Tensor X = Tensor::matrix(4, 2, rng.normal_vec(8));
    Tensor Y = Tensor::matrix(4, 2, rng.normal_vec(8));
    GanConfig cfg;
    cfg.alpha = cfg.beta = cfg.gamma2 = cfg.gamma4 = 0.0;
    cfg.gamma1 = 1.0;
    cfg.gamma3 = 3.0;  // gamma1 + gamma3 = 4
    cfg.lambda = 4.0;
    cfg.estimator = MmdEstimator::biased;
    auto nu = pooled_nu(k, X, Y);
    double obj = kernel_objective_rbf(k, X, Y, nu, cfg);

    Tensor Gxx = kernels::gram(k, X, X).K;
    Tensor Gyy = kernels::gram(k, Y, Y).K;
    Tensor Gxy = kernels::gram(k, X, Y).K;
    auto mean_of = [](const Tensor& G) {
        double s = 0;
        for (double v : G.data) s += v;
        return s / double(G.numel());
    };
    // expansion: -E_QQ - 2E_PQ - E_PP + gamma1 E_PQ + gamma3 E_PP
    double want = -mean_of(Gyy) + (cfg.gamma1 - 2.0) * mean_of(Gxy) +
                  (cfg.gamma3 - 1.0) * mean_of(Gxx);
    CHECK(std::fabs(obj - want) < 1e-9);
    // equivalently -mmd2 + gamma3 (E_PP - E_PQ)
    double want2 = -mmd2(k, X, Y, MmdEstimator::biased) +
                   cfg.gamma3 * (mean_of(Gxx) - mean_of(Gxy));
    CHECK(std::fabs(obj - want2) < 1e-9);
}

TEST_CASE("kernel objective rbf: all weights zero gives zero") {
    Rng rng(17);
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 6, 3}), 18);
    Tensor X = Tensor::matrix(3, 2, rng.normal_vec(6));
    Tensor Y = Tensor::matrix(3, 2, rng.normal_vec(6));
    GanConfig cfg;
    cfg.alpha = cfg.beta = cfg.lambda = 0.0;
    cfg.gamma1 = cfg.gamma2 = cfg.gamma3 = cfg.gamma4 = cfg.gamma5 = 0.0;
    auto nu = pooled_nu(k, X, Y);
    CHECK(kernel_objective_rbf(k, X, Y, nu, cfg) == 0.0);
}

TEST_CASE("kernel objective rbf: componentwise sum and gradient integrity") {
    Rng rng(19);
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 6, 3}), 20);
    Tensor X = Tensor::matrix(3, 2, rng.normal_vec(6));
    Tensor Y = Tensor::matrix(3, 2, rng.normal_vec(6, 1.4));
    GanConfig cfg;
    cfg.alpha = 0.4;
    cfg.beta = 1.5;
    cfg.lambda = 0.7;
    cfg.gamma1 = 0.9;
    cfg.gamma2 = 0.3;
    cfg.gamma3 = 0.6;
    cfg.gamma4 = 0.2;
    cfg.sinkhorn_iters = 25;
    auto nu = pooled_nu(k, X, Y);

    Tape tape;
    Var Xc = tape.constant(X), Yc = tape.constant(Y);
    auto vars = k.bind(tape);
    auto obj = kernel_objective_rbf_var(tape, k, vars, Xc, Yc, nu, cfg);

    // componentwise reconstruction from the exposed parts plus direct means
    double H = tape.value(obj.entropy).value();
    double W = tape.value(obj.wasserstein).value();
    double pair = tape.value(obj.pair_term).value();
    CHECK(pair ==
          doctest::Approx(pair_expectation(k, X, Y, cfg.estimator)).epsilon(1e-10));

    Tensor HX = k.features(X), HY = k.features(Y);
    double g1 = 0, g2 = 0, g3 = 0, g4 = 0;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            g1 += k.eval(X.row_span(i), Y.row_span(j));
            g2 += std::sqrt(hk::sqdist(HX.row_span(i), HY.row_span(j)));
            g3 += k.eval(X.row_span(i), X.row_span(j));
            g4 += std::sqrt(hk::sqdist(HX.row_span(i), HX.row_span(j)));
        }
    double want = cfg.alpha * H + cfg.beta * W - cfg.lambda * pair + cfg.gamma1 * g1 / 9.0 +
                  cfg.gamma2 * g2 / 9.0 + cfg.gamma3 * g3 / 9.0 + cfg.gamma4 * g4 / 9.0;
    CHECK(tape.value(obj.objective).value() == doctest::Approx(want).epsilon(1e-9));

    CHECK(hktest::fd_check(tape, obj.objective, hktest::param_vars(tape), 1e-6) < 1e-4);
}

TEST_CASE("kernel objective rbf: smmd scaling multiplies the whole objective") {
    Rng rng(21);
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 6, 3}), 22);
    Tensor X = Tensor::matrix(3, 2, rng.normal_vec(6));
    Tensor Y = Tensor::matrix(3, 2, rng.normal_vec(6));
    GanConfig cfg;
    cfg.gamma1 = 1.0;
    cfg.lambda = 1.0;
    cfg.alpha = 0.2;
    cfg.beta = 0.5;
    cfg.sinkhorn_iters = 15;
    auto nu = pooled_nu(k, X, Y);
    double plain = kernel_objective_rbf(k, X, Y, nu, cfg);
    cfg.scale_kernel_objective = true;
    double scaled = kernel_objective_rbf(k, X, Y, nu, cfg);
    double sigma = smmd_sigma(k, X, cfg.zeta);
    CHECK(scaled == doctest::Approx(plain * sigma).epsilon(1e-9));
}

TEST_CASE("kernel objective dk: sine terms vanish on coincident pairs") {
    RandomFeatureKernel rf = RandomFeatureKernel::create(1, 2, 4, 4, 2, 23);
    Tensor X = Tensor::matrix(1, 1, {0.7});
    Tensor Y = X;  // same single point: h(y) - h(x) = 0 for the only pair
    GanConfig cfg;
    cfg.alpha = cfg.beta = cfg.lambda = 0.0;
    cfg.gamma1 = 1.0;
    cfg.gamma2 = cfg.gamma3 = cfg.gamma4 = cfg.gamma5 = 0.0;
    auto nu = transport::DiscreteMeasure::uniform(2);
    double obj = kernel_objective_dk(rf, X, Y, nu, cfg);
    CHECK(obj == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("kernel objective dk: zero-output frequency nets kill the gamma5 term") {
    RandomFeatureKernel rf = RandomFeatureKernel::create(1, 2, 4, 4, 2, 24);
    for (auto name : {"wg.W0", "wg.b0", "wg.W1", "wg.b1", "wp.W0", "wp.b0", "wp.W1", "wp.b1"})
        if (rf.params.has(name)) rf.params.get(name).fill(0.0);
    Rng rng(25);
    Tensor X = Tensor::matrix(2, 1, rng.normal_vec(2));
    Tensor Y = Tensor::matrix(2, 1, rng.normal_vec(2));
    GanConfig cfg;
    cfg.alpha = cfg.beta = cfg.lambda = 0.0;
    cfg.gamma1 = cfg.gamma2 = cfg.gamma3 = cfg.gamma4 = 0.0;
    cfg.gamma5 = 1.0;
    auto nu = transport::DiscreteMeasure::uniform(4);
    CHECK(kernel_objective_dk(rf, X, Y, nu, cfg) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("kernel objective dk: componentwise reference and gradient integrity") {
    RandomFeatureKernel rf = RandomFeatureKernel::create(1, 2, 4, 3, 2, 0);
    Rng wrng(26);
    for (auto& v : rf.params.get("wp.W0").data) v += 0.15 * wrng.normal();
    Rng rng(27);
    Tensor X = Tensor::matrix(2, 1, rng.normal_vec(2));
    Tensor Y = Tensor::matrix(2, 1, rng.normal_vec(2));
    GanConfig cfg;
    cfg.alpha = 0.3;
    cfg.beta = 0.8;
    cfg.lambda = 0.5;
    cfg.gamma1 = 0.7;
    cfg.gamma2 = 0.2;
    cfg.gamma3 = 0.4;
    cfg.gamma4 = 0.1;
    cfg.gamma5 = 0.0;
    cfg.sinkhorn_iters = 20;

    Tensor pooled = Tensor::zeros({4, 1});
    pooled.at(0, 0) = X.at(0, 0);
    pooled.at(1, 0) = X.at(1, 0);
    pooled.at(2, 0) = Y.at(0, 0);
    pooled.at(3, 0) = Y.at(1, 0);
    auto nu = hklearn::normalized_kde(rf, pooled);

    // independent reference for the sine means from plain net evaluations
    Tensor Z = rf.noise();
    Tensor HX = rf.features(X), HY = rf.features(Y);
    Tensor Wg = autodiff::plain_mlp_apply(rf.params, "wg", rf.freq_global_spec, Z);
    auto ksin_mean = [&](const Tensor& HA, const Tensor& HB) {
        std::size_t n = HA.rows(), m = HB.rows(), p = HA.cols();
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                double sg = 0.0;
                for (std::size_t l = 0; l < rf.num_freq; ++l) {
                    double d = 0.0;
                    for (std::size_t q = 0; q < p; ++q)
                        d += Wg.at(l, q) * (HB.at(j, q) - HA.at(i, q));
                    sg += std::sin(d);
                }
                sg /= double(rf.num_freq);
                Tensor in2 = Tensor::zeros({rf.num_freq, rf.noise_dim + 2 * p});
                for (std::size_t l = 0; l < rf.num_freq; ++l) {
                    for (std::size_t q = 0; q < rf.noise_dim; ++q) in2.at(l, q) = Z.at(l, q);
                    for (std::size_t q = 0; q < p; ++q) {
                        in2.at(l, rf.noise_dim + q) = HA.at(i, q);
                        in2.at(l, rf.noise_dim + p + q) = HB.at(j, q);
                    }
                }
                Tensor Wp = autodiff::plain_mlp_apply(rf.params, "wp", rf.freq_pair_spec, in2);
                double sp = 0.0;
                for (std::size_t l = 0; l < rf.num_freq; ++l) {
                    double d = 0.0;
                    for (std::size_t q = 0; q < p; ++q)
                        d += Wp.at(l, q) * (HB.at(j, q) - HA.at(i, q));
                    sp += std::sin(d);
                }
                sp /= double(rf.num_freq);
                total += sg + sp;
            }
        return total / double(n * m);
    };

    double feats = 0.0, feats_same = 0.0;
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            feats += std::sqrt(hk::sqdist(HX.row_span(i), HY.row_span(j)));
            feats_same += std::sqrt(hk::sqdist(HX.row_span(i), HX.row_span(j)));
        }
    feats /= 4.0;
    feats_same /= 4.0;

    Tape tape;
    Var Xc = tape.constant(X), Yc = tape.constant(Y);
    auto vars = rf.bind(tape);
    auto obj = kernel_objective_dk_var(tape, rf, vars, Xc, Yc, nu, cfg);
    double H = tape.value(obj.entropy).value();
    double W = tape.value(obj.wasserstein).value();
    double pair = tape.value(obj.pair_term).value();
    double want = cfg.alpha * H + cfg.beta * W - cfg.lambda * pair +
                  cfg.gamma1 * ksin_mean(HX, HY) + cfg.gamma2 * feats +
                  cfg.gamma3 * ksin_mean(HX, HX) + cfg.gamma4 * feats_same;
    CHECK(tape.value(obj.objective).value() == doctest::Approx(want).epsilon(1e-9));
    CHECK(pair ==
          doctest::Approx(pair_expectation(rf, X, Y, cfg.estimator)).epsilon(1e-10));

    CHECK(hktest::fd_check(tape, obj.objective, hktest::param_vars(tape), 1e-6) < 1e-4);
}

TEST_CASE("kernel objective dk: gamma5 gradient integrity") {
    RandomFeatureKernel rf = RandomFeatureKernel::create(1, 2, 3, 2, 2, 28);
    Rng wrng(29);
    for (auto& v : rf.params.get("wp.W0").data) v += 0.2 * wrng.normal();
    Rng rng(30);
    Tensor X = Tensor::matrix(2, 1, rng.normal_vec(2));
    Tensor Y = Tensor::matrix(2, 1, rng.normal_vec(2));
    GanConfig cfg;
    cfg.alpha = cfg.beta = cfg.lambda = 0.0;
    cfg.gamma1 = cfg.gamma2 = cfg.gamma3 = cfg.gamma4 = 0.0;
    cfg.gamma5 = 1.0;
    auto nu = transport::DiscreteMeasure::uniform(4);

    Tape tape;
    Var Xc = tape.constant(X), Yc = tape.constant(Y);
    auto vars = rf.bind(tape);
    auto obj = kernel_objective_dk_var(tape, rf, vars, Xc, Yc, nu, cfg);
    CHECK(tape.value(obj.objective).value() > 0.0);
    CHECK(hktest::fd_check(tape, obj.objective, hktest::param_vars(tape), 1e-6) < 1e-4);
}

TEST_CASE("generator: sampling is deterministic given the noise") {
    Generator g = Generator::create(4, 16, 2, 31);
    Rng rng(32);
    Tensor Z = g.noise_batch(5, rng);
    Tensor a = g.sample_from(Z);
    Tensor b = g.sample_from(Z);
    CHECK(a.data == b.data);
    CHECK(a.rows() == 5);
    CHECK(a.cols() == 2);
}

TEST_CASE("train_dgm: zero generator steps leaves the generator unchanged") {
    Generator g = Generator::create(4, 8, 2, 33);
    auto before = g.params.values;
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 8, 4}), 34);
    GanConfig cfg;
    cfg.generator_steps = 0;
    cfg.batch_size = 8;
    Rng rng(35);
    auto res = train_dgm(genmodel::gaussian_sampler({0.0, 0.0}, 1.0), g, k, cfg, rng);
    CHECK_FALSE(res.aborted);
    CHECK(res.trace.empty());
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(g.params.values[i].second.data == before[i].second.data);
}

TEST_CASE("train_dgm: short run stays finite and records the trace") {
    Generator g = Generator::create(4, 8, 2, 36);
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 8, 4}), 37);
    GanConfig cfg;
    cfg.generator_steps = 5;
    cfg.batch_size = 16;
    cfg.sinkhorn_iters = 10;
    Rng rng(38);
    auto res = train_dgm(genmodel::gaussian_sampler({1.0, -1.0}, 0.5), g, k, cfg, rng);
    REQUIRE_FALSE(res.aborted);
    REQUIRE(res.trace.size() == 5);
    for (const auto& r : res.trace) {
        CHECK(std::isfinite(r.kernel_objective));
        CHECK(std::isfinite(r.mmd2_train));
        CHECK(r.smmd_sigma == 1.0);
    }
}

TEST_CASE("train_dgm: generator gradients flow for mismatched distributions") {
    Generator g = Generator::create(4, 8, 2, 39);
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 8, 4}), 40);
    Rng rng(41);
    Tensor X = genmodel::gaussian_sampler({3.0, 3.0}, 0.5)(12, rng);
    Tensor Z = g.noise_batch(12, rng);

    Tape tape;
    Var Zc = tape.constant(Z);
    auto gvars = autodiff::bind_mlp(tape, g.params, g.prefix, g.spec);
    Var Y = autodiff::mlp_apply(g.spec, gvars, Zc);
    auto kvars = k.bind_const(tape);
    Var HX = k.features_var(kvars, tape.constant(X));
    Var HY = k.features_var(kvars, Y);
    Var loss = mmd2_var(tape, k.gram_from_features(HX, HX), k.gram_from_features(HY, HY),
                        k.gram_from_features(HX, HY), MmdEstimator::unbiased);
    tape.backward(loss);
    double norm = 0.0;
    for (auto [name, id] : tape.params()) {
        Tensor gr = tape.grad(Var{&tape, id});
        for (double v : gr.data) norm += v * v;
    }
    CHECK(norm > 1e-12);
}

TEST_CASE("smmd: sigma guard rejects nonpositive zeta") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({1, 4, 2}), 42);
    Tensor X = Tensor::matrix(2, 1, {0.0, 1.0});
    CHECK_THROWS(smmd_sigma(k, X, 0.0));
}

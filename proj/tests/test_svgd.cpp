#include <doctest.h>

#include <cmath>

#include "hk/bnn.hpp"
#include "hk/rng.hpp"
#include "hk/svgd.hpp"
#include "test_util.hpp"

using namespace hk;
using namespace hk::svgd;
using hk::autodiff::MlpSpec;
using hk::kernels::DeepRbfKernel;
using hk::kernels::RandomFeatureKernel;

namespace {

// finite-difference oracle for R_i = sum_j grad_{x_j} k(x_j, x_i)
template <class K>
Tensor fd_repulsion(const K& kernel, const Tensor& P, double h = 1e-5) {
    std::size_t n = P.rows(), d = P.cols();
    Tensor R = Tensor::zeros({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t q = 0; q < d; ++q) {
                Tensor up = P, dn = P;
                up.at(j, q) += h;
                dn.at(j, q) -= h;
                double kp = kernel.eval(up.row_span(j), P.row_span(i));
                double km = kernel.eval(dn.row_span(j), P.row_span(i));
                R.at(i, q) += (kp - km) / (2.0 * h);
            }
    return R;
}

}  // namespace

TEST_CASE("target density: analytic gradient matches finite differences") {
    TargetDensity t = gaussian_target({0.3, -0.7}, 1.4);
    Rng rng(1);
    for (int rep = 0; rep < 5; ++rep) {
        auto x = rng.normal_vec(2, 2.0);
        auto g = t.grad_log_density(x);
        for (std::size_t q = 0; q < 2; ++q) {
            auto up = x, dn = x;
            up[q] += 1e-5;
            dn[q] -= 1e-5;
            double fd = (t.log_density(up) - t.log_density(dn)) / 2e-5;
            CHECK(g[q] == doctest::Approx(fd).epsilon(1e-4));
        }
    }
}

TEST_CASE("svgd step: single particle follows the log-density gradient") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({1, 8, 4}), 2);
    TargetDensity t = gaussian_target({0.0}, 1.0);
    ParticleSet p;
    p.X = Tensor::matrix(1, 1, {2.5});
    SvgdConfig cfg;
    cfg.step_size = 0.1;
    ParticleSet q = svgd_step(p, t, deep_rbf_ops(&k), cfg);
    // k(x,x) = 1 and the repulsion vanishes for one particle
    CHECK(q.X.at(0, 0) == doctest::Approx(2.5 + 0.1 * (-2.5)).epsilon(1e-12));
    CHECK(q.iteration == 1);
}

TEST_CASE("svgd step: mirror-symmetric particles stay mirror-symmetric") {
    TargetDensity t = gaussian_target({0.0}, 1.0);
    ParticleSet p;
    p.X = Tensor::matrix(2, 1, {1.7, -1.7});
    SvgdConfig cfg;
    cfg.step_size = 0.05;
    ParticleSet q = svgd_step(p, t, fixed_rbf_ops(1.0), cfg);
    CHECK(q.X.at(0, 0) == doctest::Approx(-q.X.at(1, 0)).epsilon(1e-12));
}

TEST_CASE("svgd step: fixed point at the mode") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 6, 3}), 3);
    TargetDensity t = gaussian_target({0.0, 0.0}, 1.0);
    ParticleSet p;
    p.X = Tensor::matrix(1, 2, {0.0, 0.0});
    SvgdConfig cfg;
    cfg.step_size = 0.1;
    ParticleSet q = svgd_step(p, t, deep_rbf_ops(&k), cfg);
    CHECK(q.X.data == p.X.data);
}

TEST_CASE("kernel gradient: learned families match finite differences") {
    Rng rng(4);
    Tensor P = Tensor::matrix(3, 2, rng.normal_vec(6));
    Tensor ones = Tensor::full({3, 3}, 1.0);

    DeepRbfKernel dk = DeepRbfKernel::create(MlpSpec::make({2, 8, 4}), 5);
    Tensor got = deep_rbf_ops(&dk).weighted_repulsion(P, ones);
    Tensor want = fd_repulsion(dk, P);
    CHECK(hktest::rel_err(got, want) < 1e-4);

    RandomFeatureKernel rf = RandomFeatureKernel::create(2, 3, 6, 8, 2, 6);
    Rng wrng(7);
    for (auto& v : rf.params.get("wp.W0").data) v += 0.1 * wrng.normal();
    Tensor got2 = random_feature_ops(&rf).weighted_repulsion(P, ones);
    Tensor want2 = fd_repulsion(rf, P);
    CHECK(hktest::rel_err(got2, want2) < 1e-4);
}

TEST_CASE("rbf median kernel: bandwidth formula and degenerate floor") {
    Tensor P = Tensor::matrix(2, 1, {0.0, 3.0});
    RbfMedianKernel k = rbf_median_kernel(P);
    CHECK(k.bandwidth2 == doctest::Approx(9.0 / std::log(3.0)).epsilon(1e-12));

    Tensor same = Tensor::matrix(3, 1, {1.0, 1.0, 1.0});
    RbfMedianKernel kf = rbf_median_kernel(same);
    CHECK(kf.bandwidth2 == doctest::Approx(1e-6));
    std::vector<double> a = {1.0}, b = {1.0};
    CHECK(kf.eval(a, b) == 1.0);

    Rng rng(8);
    auto x = rng.normal_vec(1);
    CHECK(k.eval(x, x) == 1.0);

    Tensor single = Tensor::matrix(1, 1, {0.0});
    CHECK_THROWS(rbf_median_kernel(single));
}

TEST_CASE("svgd: equivariance under translation for the median kernel") {
    TargetDensity t0 = gaussian_target({0.0}, 1.0);
    TargetDensity t1 = gaussian_target({2.0}, 1.0);
    Rng rng(9);
    Tensor base = Tensor::matrix(6, 1, rng.normal_vec(6));
    ParticleSet p0, p1;
    p0.X = base;
    p1.X = base;
    for (auto& v : p1.X.data) v += 2.0;
    SvgdConfig cfg;
    cfg.step_size = 0.1;
    auto ops = rbf_median_ops();
    for (int it = 0; it < 5; ++it) {
        p0 = svgd_step(p0, t0, ops, cfg);
        p1 = svgd_step(p1, t1, ops, cfg);
    }
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(p1.X.at(i, 0) - 2.0 == doctest::Approx(p0.X.at(i, 0)).epsilon(1e-9));
}

TEST_CASE("svgd: invalid step size rejected") {
    TargetDensity t = gaussian_target({0.0}, 1.0);
    ParticleSet p;
    p.X = Tensor::matrix(1, 1, {1.0});
    SvgdConfig cfg;
    cfg.step_size = 0.0;
    CHECK_THROWS(svgd_step(p, t, rbf_median_ops(), cfg));
}

TEST_CASE("hk-svgd: zero step size trains the kernel but freezes particles") {
    Rng rng(10);
    TargetDensity t = gaussian_target({0.0}, 1.0);
    ParticleSet p;
    p.X = Tensor::matrix(6, 1, rng.normal_vec(6, 2.0));
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({1, 8, 4}), 11);
    auto before_particles = p.X.data;
    auto before_params = k.params.values;

    HkSvgdConfig cfg;
    cfg.alternations = 3;
    cfg.svgd.step_size = 0.0;
    cfg.hk.outer_steps = 1;
    cfg.hk.inner_opt_steps = 2;
    cfg.hk.sinkhorn_iters = 20;
    auto res = hk_svgd(t, p, k, cfg, rng);
    REQUIRE_FALSE(res.aborted);
    CHECK(res.particles.X.data == before_particles);
    bool changed = false;
    for (std::size_t i = 0; i < before_params.size(); ++i)
        changed = changed || (k.params.values[i].second.data != before_params[i].second.data);
    CHECK(changed);
}

TEST_CASE("hk-svgd: single particle reduces to gradient ascent") {
    Rng rng(12);
    TargetDensity t = gaussian_target({0.0}, 1.0);
    ParticleSet p;
    p.X = Tensor::matrix(1, 1, {3.0});
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({1, 8, 4}), 13);
    HkSvgdConfig cfg;
    cfg.alternations = 4;
    cfg.svgd.step_size = 0.1;
    cfg.svgd.adagrad = false;
    auto res = hk_svgd(t, p, k, cfg, rng);
    REQUIRE_FALSE(res.aborted);
    double x = 3.0;
    for (int it = 0; it < 4; ++it) x += 0.1 * (-x);
    CHECK(res.particles.X.at(0, 0) == doctest::Approx(x).epsilon(1e-10));
}

TEST_CASE("hk-svgd: short run moves particles toward the target") {
    Rng rng(14);
    TargetDensity t = gaussian_target({0.0}, 1.0);
    ParticleSet p;
    p.X = Tensor::zeros({10, 1});
    for (std::size_t i = 0; i < 10; ++i) p.X.at(i, 0) = 5.0 + rng.normal();

    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({1, 16, 8}), 15);
    HkSvgdConfig cfg;
    cfg.alternations = 120;
    cfg.svgd.step_size = 0.25;
    cfg.svgd.adagrad = true;
    cfg.hk.outer_steps = 1;
    cfg.hk.inner_opt_steps = 3;
    cfg.hk.lr = 3e-3;
    cfg.hk.lambda = 0.05;
    cfg.hk.sinkhorn_iters = 25;
    auto res = hk_svgd(t, p, k, cfg, rng);
    REQUIRE_FALSE(res.aborted);
    double mean, var;
    particle_moments(res.particles.X, mean, var);
    CHECK(std::fabs(mean) < 1.0);
    CHECK(var > 0.05);
    CHECK(var < 4.0);
}

TEST_CASE("svgd: determinism for identical seeds and config") {
    auto run = [] {
        Rng rng(77);
        TargetDensity t = gaussian_target({0.0}, 1.0);
        ParticleSet p;
        p.X = Tensor::matrix(8, 1, rng.normal_vec(8, 2.0));
        DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({1, 8, 4}), 78);
        HkSvgdConfig cfg;
        cfg.alternations = 10;
        cfg.svgd.step_size = 0.1;
        cfg.hk.inner_opt_steps = 2;
        cfg.hk.sinkhorn_iters = 15;
        auto res = hk_svgd(t, p, k, cfg, rng);
        return res.particles.X.data;
    };
    CHECK(run() == run());
}

TEST_CASE("product kernel ops: gram multiplies and repulsion splits by block") {
    Rng rng(16);
    Tensor P = Tensor::matrix(4, 3, rng.normal_vec(12));
    std::vector<KernelBlock> blocks;
    blocks.push_back({0, 2, fixed_rbf_ops(1.5)});
    blocks.push_back({2, 3, fixed_rbf_ops(0.7)});
    auto ops = product_ops(std::move(blocks));

    Tensor G = ops.gram(P);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            double d2a = 0.0, d2b = 0.0;
            for (std::size_t q = 0; q < 2; ++q) {
                double d = P.at(i, q) - P.at(j, q);
                d2a += d * d;
            }
            double d = P.at(i, 2) - P.at(j, 2);
            d2b = d * d;
            CHECK(G.at(i, j) ==
                  doctest::Approx(std::exp(-d2a / 1.5) * std::exp(-d2b / 0.7)).epsilon(1e-12));
        }

    // product-rule repulsion against finite differences of the product kernel
    struct ProductKernel {
        double eval(std::span<const double> a, std::span<const double> b) const {
            double d2a = 0.0, d2b = 0.0;
            for (std::size_t q = 0; q < 2; ++q) {
                double d = a[q] - b[q];
                d2a += d * d;
            }
            double d = a[2] - b[2];
            d2b = d * d;
            return std::exp(-d2a / 1.5) * std::exp(-d2b / 0.7);
        }
    } pk;
    Tensor got = ops.weighted_repulsion(P, Tensor::full({4, 4}, 1.0));
    Tensor want = fd_repulsion(pk, P);
    CHECK(hktest::rel_err(got, want) < 1e-4);
}

TEST_CASE("bnn: predictive log-likelihood closed form for one particle") {
    CHECK(gaussian_log_density(0.7, 0.2, 0.3) ==
          doctest::Approx(-0.5 * std::log(2.0 * 3.14159265358979323846 * 0.09) -
                          0.25 / 0.18)
              .epsilon(1e-12));
}

TEST_CASE("bnn: zero-noise linear data is learned to small error") {
    svgd::Dataset data = make_linear(80, 0.0, 3);
    BnnSpec spec;
    spec.hidden = 16;
    spec.particles = 4;
    spec.obs_noise = 0.1;
    BnnTrainConfig cfg;
    cfg.iterations = 1200;
    cfg.svgd.step_size = 0.05;
    auto m = bnn_regression(data, spec, "svgd", cfg, 5);
    CHECK(m.rmse < 0.1);
    CHECK(std::isfinite(m.test_ll));
}

TEST_CASE("bnn: hk-svgd variant trains and reports finite metrics") {
    svgd::Dataset data = make_sinusoid(60, 0.1, 6);
    BnnSpec spec;
    spec.hidden = 12;
    spec.particles = 5;
    spec.obs_noise = 0.2;
    BnnTrainConfig cfg;
    cfg.iterations = 60;
    cfg.svgd.step_size = 0.05;
    cfg.feat_hidden = 8;
    cfg.feat_out = 8;
    cfg.hk.sinkhorn_iters = 15;
    auto m = bnn_regression(data, spec, "hk-svgd", cfg, 7);
    CHECK(std::isfinite(m.rmse));
    CHECK(std::isfinite(m.test_ll));
    CHECK(m.rmse < 2.0);
    CHECK(m.wallclock_s >= 0.0);
    CHECK(m.method == "hk-svgd");
}

TEST_CASE("bnn: invalid method and tiny datasets rejected") {
    svgd::Dataset data = make_linear(40, 0.1, 8);
    BnnSpec spec;
    BnnTrainConfig cfg;
    CHECK_THROWS(bnn_regression(data, spec, "nope", cfg, 1));
    svgd::Dataset tiny = make_linear(5, 0.1, 9);
    CHECK_THROWS(bnn_regression(tiny, spec, "svgd", cfg, 1));
}

#include <doctest.h>

#include <cmath>

#include "hk/kernels.hpp"
#include "hk/linalg.hpp"
#include "hk/rng.hpp"
#include "test_util.hpp"

using namespace hk;
using namespace hk::kernels;
using hk::autodiff::Activation;
using hk::autodiff::MlpSpec;
using hk::autodiff::Tape;
using hk::autodiff::Var;
using hktest::fd_check;

namespace {

DeepRbfKernel identity_feature_kernel(std::size_t d) {
    MlpSpec spec = MlpSpec::make({d, d}, Activation::identity, Activation::identity);
    DeepRbfKernel k;
    k.spec = spec;
    Tensor W = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < d; ++i) W.at(i, i) = 1.0;
    k.params.add("h.W0", W);
    k.params.add("h.b0", Tensor::zeros({d}));
    return k;
}

DeepRbfKernel constant_feature_kernel(std::size_t d, double c) {
    MlpSpec spec = MlpSpec::make({d, 2}, Activation::identity, Activation::identity);
    DeepRbfKernel k;
    k.spec = spec;
    k.params.add("h.W0", Tensor::zeros({d, 2}));
    k.params.add("h.b0", Tensor::full({2}, c));
    return k;
}

}  // namespace

TEST_CASE("deep rbf: k(x,x) = 1 exactly") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({3, 8, 4}), 1);
    Rng rng(2);
    for (int i = 0; i < 10; ++i) {
        auto x = rng.normal_vec(3, 2.0);
        CHECK(k.eval(x, x) == 1.0);
    }
}

TEST_CASE("deep rbf: identity features reduce to the gaussian kernel") {
    DeepRbfKernel k = identity_feature_kernel(2);
    std::vector<double> x0 = {0.0, 0.0}, x = {1.0, 0.0};
    CHECK(k.eval(x0, x) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("deep rbf: seed-0 3-layer net matches the scalar reference evaluator") {
    MlpSpec spec = MlpSpec::make({1, 8, 8, 4});
    DeepRbfKernel k = DeepRbfKernel::create(spec, 0);
    std::vector<double> a = {0.5}, b = {-0.5};
    auto ha = hktest::ref_mlp_forward(k.params, "h", spec, a);
    auto hb = hktest::ref_mlp_forward(k.params, "h", spec, b);
    double want = std::exp(-hk::sqdist(ha, hb));
    CHECK(k.eval(a, b) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("deep rbf: symmetry is exact") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 8, 3}), 9);
    Rng rng(10);
    for (int i = 0; i < 20; ++i) {
        auto x = rng.normal_vec(2), y = rng.normal_vec(2);
        CHECK(k.eval(x, y) == k.eval(y, x));
    }
}

TEST_CASE("deep rbf: tape gram agrees with plain gram and differentiates") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 6, 3}), 4);
    Rng rng(5);
    Tensor X = Tensor::matrix(4, 2, rng.normal_vec(8));
    Tensor Y = Tensor::matrix(3, 2, rng.normal_vec(6));
    GramMatrix G = gram(k, X, Y);

    Tape tape;
    Var Xv = tape.constant(X), Yv = tape.constant(Y);
    Var Gv = k.gram_var(k.bind(tape), Xv, Yv);
    const Tensor& Gt = tape.value(Gv);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            CHECK(Gt.at(i, j) == doctest::Approx(G.K.at(i, j)).epsilon(1e-12));

    Var loss = sum(mul(Gv, Gv));
    CHECK(fd_check(tape, loss, hktest::param_vars(tape)) < 1e-4);
}

TEST_CASE("gram: single point gives the 1x1 unit matrix") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 4, 2}), 3);
    Tensor X = Tensor::matrix(1, 2, {0.7, -0.2});
    GramMatrix G = gram(k, X, X);
    REQUIRE(G.K.numel() == 1);
    CHECK(G.K.data[0] == 1.0);
}

TEST_CASE("gram: constant features give the all-ones matrix") {
    DeepRbfKernel k = constant_feature_kernel(2, 1.7);
    Rng rng(6);
    Tensor X = Tensor::matrix(5, 2, rng.normal_vec(10));
    GramMatrix G = gram(k, X, X);
    for (double v : G.K.data) CHECK(v == 1.0);
}

TEST_CASE("gram: empty inputs are rejected") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({2, 4, 2}), 3);
    Tensor X = Tensor::matrix(1, 2, {0.0, 0.0});
    Tensor empty;
    CHECK_THROWS(gram(k, X, empty));
}

TEST_CASE("gram: symmetric PSD on random points (deep rbf)") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({3, 10, 5}), 12);
    Rng rng(13);
    Tensor X = Tensor::matrix(5, 3, rng.normal_vec(15, 1.5));
    GramMatrix G = gram(k, X, X);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) CHECK(G.K.at(i, j) == G.K.at(j, i));
    CHECK(min_eigenvalue(G.K) >= -1e-8);
}

TEST_CASE("gram: exclude_diag masks the diagonal for off-diagonal means") {
    DeepRbfKernel k = DeepRbfKernel::create(MlpSpec::make({1, 4, 2}), 8);
    Tensor X = Tensor::matrix(3, 1, {0.0, 1.0, 2.0});
    GramMatrix full = gram(k, X, X);
    GramMatrix masked = gram(k, X, X, true);
    CHECK(masked.diag_excluded);
    for (std::size_t i = 0; i < 3; ++i) CHECK(masked.K.at(i, i) == 0.0);
    CHECK(full.offdiag_mean() == doctest::Approx(masked.offdiag_mean()));
}

TEST_CASE("psd property: both kernel families on up to 32 random points") {
    Rng rng(77);
    for (int rep = 0; rep < 5; ++rep) {
        std::size_t n = 8 + rng.below(25);
        Tensor X = Tensor::matrix(n, 2, rng.normal_vec(2 * n, 2.0));
        DeepRbfKernel dk = DeepRbfKernel::create(MlpSpec::make({2, 12, 6}), rng.next_u64());
        CHECK(min_eigenvalue(gram(dk, X, X).K) >= -1e-6);
        RandomFeatureKernel rf =
            RandomFeatureKernel::create(2, 4, 8, 32, 3, rng.next_u64());
        CHECK(min_eigenvalue(gram(rf, X, X).K) >= -1e-6);
    }
}

TEST_CASE("random feature: k(x,x) = 1 under the averaging mixing rule") {
    RandomFeatureKernel k = RandomFeatureKernel::create(2, 4, 8, 16, 3, 21);
    Rng rng(22);
    for (int i = 0; i < 10; ++i) {
        auto x = rng.normal_vec(2, 2.0);
        CHECK(k.eval(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("random feature: forced frequency evaluates the cosine exactly") {
    RandomFeatureKernel k;
    k.num_freq = 1;
    k.noise_dim = 1;
    k.noise_seed = 5;
    k.feat_spec = MlpSpec::make({1, 1}, Activation::identity, Activation::identity);
    k.freq_global_spec = MlpSpec::make({1, 1}, Activation::identity, Activation::identity);
    k.freq_pair_spec = MlpSpec::make({3, 1}, Activation::identity, Activation::identity);
    k.params.add("h.W0", Tensor::matrix(1, 1, {1.0}));
    k.params.add("h.b0", Tensor::zeros({1}));
    k.params.add("wg.W0", Tensor::matrix(1, 1, {0.0}));
    k.params.add("wg.b0", Tensor::vector({1.0}));
    k.params.add("wp.W0", Tensor::matrix(3, 1, {0, 0, 0}));
    k.params.add("wp.b0", Tensor::zeros({1}));

    const double pi = 3.14159265358979323846;
    std::vector<double> x0 = {0.0}, x = {pi};
    auto terms = k.eval_terms(x0, x);
    CHECK(terms.term1 == doctest::Approx(-1.0).epsilon(1e-12));   // cos(-pi)
    CHECK(terms.term2_sym == doctest::Approx(1.0).epsilon(1e-12));  // cos(0)
    CHECK(terms.value == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("random feature: same seed is bit-identical, symmetry exact") {
    RandomFeatureKernel a = RandomFeatureKernel::create(2, 4, 8, 1024, 3, 33);
    RandomFeatureKernel b = RandomFeatureKernel::create(2, 4, 8, 1024, 3, 33);
    Rng rng(34);
    for (int i = 0; i < 5; ++i) {
        auto x = rng.normal_vec(2), y = rng.normal_vec(2);
        double v1 = a.eval(x, y);
        double v2 = b.eval(x, y);
        CHECK(v1 == v2);             // bit-identical rerun
        CHECK(v1 == a.eval(y, x));   // exact symmetry after symmetrization
        CHECK(std::fabs(v1) <= 1.0 + 1e-12);
    }
}

TEST_CASE("random feature: tape gram agrees with plain eval and differentiates") {
    RandomFeatureKernel k = RandomFeatureKernel::create(2, 3, 6, 8, 2, 41);
    // give the pair net some real pair dependence for the gradient check
    Rng wrng(42);
    for (auto& v : k.params.get("wp.W0").data) v += 0.1 * wrng.normal();
    Rng rng(43);
    Tensor X = Tensor::matrix(3, 2, rng.normal_vec(6));
    Tensor Y = Tensor::matrix(2, 2, rng.normal_vec(4));

    Tape tape;
    Var Xv = tape.constant(X), Yv = tape.constant(Y);
    auto bound = k.bind(tape);
    Var Gv = k.gram_var(tape, bound, Xv, Yv);
    const Tensor& Gt = tape.value(Gv);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double want = k.eval(X.row_span(i), Y.row_span(j));
            CHECK(Gt.at(i, j) == doctest::Approx(want).epsilon(1e-10));
        }

    Var loss = sum(mul(Gv, Gv));
    CHECK(fd_check(tape, loss, hktest::param_vars(tape)) < 1e-4);
}

TEST_CASE("unit diagonal within 1e-12 for both families") {
    Rng rng(55);
    Tensor X = Tensor::matrix(6, 2, rng.normal_vec(12, 1.5));
    DeepRbfKernel dk = DeepRbfKernel::create(MlpSpec::make({2, 8, 4}), 56);
    RandomFeatureKernel rf = RandomFeatureKernel::create(2, 4, 8, 32, 3, 57);
    GramMatrix G1 = gram(dk, X, X), G2 = gram(rf, X, X);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(std::fabs(G1.K.at(i, i) - 1.0) <= 1e-12);
        CHECK(std::fabs(G2.K.at(i, i) - 1.0) <= 1e-12);
    }
}

TEST_CASE("spectral normalization: known singular values") {
    Tensor W = Tensor::matrix(2, 2, {3.0, 0.0, 0.0, 1.0});
    auto res = spectral_normalize(W, 50);
    CHECK(res.estimate == doctest::Approx(3.0).epsilon(1e-10));
    CHECK(res.W.at(0, 0) == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(res.W.at(1, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-10));

    Tensor I = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
    auto ri = spectral_normalize(I, 10);
    CHECK(ri.estimate == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ri.W.data == I.data);
}

TEST_CASE("spectral normalization: matches the dense SVD oracle within 1%") {
    Rng rng(61);
    Tensor W = Tensor::matrix(8, 8, rng.normal_vec(64));
    auto res = spectral_normalize(W, 50);
    double want = singular_values(W).front();
    CHECK(std::fabs(res.estimate - want) / want < 0.01);

    // post-normalization spectral norm is at most 1 + 1e-6
    auto res2 = spectral_normalize(res.W, 50);
    CHECK(res2.estimate <= 1.0 + 1e-6);
}

TEST_CASE("spectral normalization: zero matrix flagged and unchanged") {
    Tensor Z = Tensor::zeros({3, 2});
    auto res = spectral_normalize(Z, 5);
    CHECK(res.zero_matrix);
    CHECK(res.estimate == 0.0);
    CHECK(res.W.data == Z.data);
}

TEST_CASE("spectral normalization: optional post-scale factor") {
    Tensor W = Tensor::matrix(2, 2, {3.0, 0.0, 0.0, 1.0});
    auto res = spectral_normalize(W, 50, 2.0);
    CHECK(res.W.at(0, 0) == doctest::Approx(2.0).epsilon(1e-9));
}

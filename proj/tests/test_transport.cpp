#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "hk/rng.hpp"
#include "hk/transport.hpp"
#include "test_util.hpp"

using namespace hk;
using namespace hk::transport;
using hk::autodiff::Tape;
using hk::autodiff::Var;

namespace {

// independent 1-D oracle: for squared cost on sorted supports the monotone
// (CDF) coupling is optimal for arbitrary weights
double monotone_1d_cost(std::vector<double> xs, std::vector<double> wa, std::vector<double> ys,
                        std::vector<double> wb) {
    std::vector<std::size_t> ia(xs.size()), ib(ys.size());
    for (std::size_t i = 0; i < ia.size(); ++i) ia[i] = i;
    for (std::size_t j = 0; j < ib.size(); ++j) ib[j] = j;
    std::sort(ia.begin(), ia.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
    std::sort(ib.begin(), ib.end(), [&](auto a, auto b) { return ys[a] < ys[b]; });
    double cost = 0.0;
    std::size_t i = 0, j = 0;
    double ra = wa[ia[0]], rb = wb[ib[0]];
    while (i < ia.size() && j < ib.size()) {
        double q = std::min(ra, rb);
        double d = xs[ia[i]] - ys[ib[j]];
        cost += q * d * d;
        ra -= q;
        rb -= q;
        if (ra <= 1e-15 && ++i < ia.size()) ra = wa[ia[i]];
        if (rb <= 1e-15 && ++j < ib.size()) rb = wb[ib[j]];
    }
    return cost;
}

DiscreteMeasure random_measure(Rng& rng, std::size_t n) {
    DiscreteMeasure m;
    m.w.resize(n);
    double s = 0.0;
    for (auto& w : m.w) {
        w = 0.05 + rng.uniform();
        s += w;
    }
    for (auto& w : m.w) w /= s;
    return m;
}

}  // namespace

TEST_CASE("cost matrix: zero diagonal on identical supports") {
    Rng rng(1);
    Tensor X = Tensor::matrix(4, 2, rng.normal_vec(8));
    Tensor C = cost_matrix(X, X);
    for (std::size_t i = 0; i < 4; ++i) CHECK(C.at(i, i) == 0.0);
}

TEST_CASE("cost matrix: hand cases") {
    Tensor X = Tensor::matrix(1, 1, {0.0});
    Tensor Y = Tensor::matrix(1, 1, {3.0});
    CHECK(cost_matrix(X, Y).data[0] == 9.0);

    Tensor X2 = Tensor::matrix(2, 2, {0, 0, 1, 0});
    Tensor Y2 = Tensor::matrix(1, 2, {0, 1});
    Tensor C = cost_matrix(X2, Y2);
    CHECK(C.at(0, 0) == 1.0);
    CHECK(C.at(1, 0) == 2.0);
}

TEST_CASE("cost matrix: empty sets rejected") {
    Tensor X = Tensor::matrix(1, 1, {0.0});
    Tensor empty;
    CHECK_THROWS(cost_matrix(X, empty));
}

TEST_CASE("sinkhorn: identical measures on shared support go to zero with eps") {
    Rng rng(3);
    Tensor X = Tensor::matrix(5, 2, rng.normal_vec(10));
    Tensor C = cost_matrix(X, X);
    DiscreteMeasure a = DiscreteMeasure::uniform(5);
    double mean = matrix_mean(C);
    auto r = sinkhorn(a, a, C, 1e-4 * mean, 20000, 1e-12);
    CHECK(r.distance >= 0.0);
    CHECK(r.distance < 5e-3 * mean);
}

TEST_CASE("sinkhorn: two diracs pay the squared distance") {
    Tensor C = Tensor::matrix(1, 1, {4.0});  // distance 2
    DiscreteMeasure a{{1.0}}, b{{1.0}};
    auto r = sinkhorn(a, b, C, 0.01, 100, 1e-12);
    CHECK(r.distance == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(r.plan.data[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("sinkhorn: marginal feasibility and convergence report") {
    Rng rng(5);
    Tensor X = Tensor::matrix(6, 2, rng.normal_vec(12));
    Tensor Y = Tensor::matrix(4, 2, rng.normal_vec(8));
    Tensor C = cost_matrix(X, Y);
    DiscreteMeasure a = random_measure(rng, 6), b = random_measure(rng, 4);
    auto r = sinkhorn(a, b, C, 0.05 * matrix_mean(C), 5000, 1e-10);
    CHECK(r.converged);
    CHECK(r.marginal_residual < 1e-10);
    std::vector<double> rows(6, 0.0), cols(4, 0.0);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            rows[i] += r.plan.at(i, j);
            cols[j] += r.plan.at(i, j);
        }
    for (std::size_t i = 0; i < 6; ++i) CHECK(rows[i] == doctest::Approx(a.w[i]).epsilon(1e-8));
    for (std::size_t j = 0; j < 4; ++j) CHECK(cols[j] == doctest::Approx(b.w[j]).epsilon(1e-8));
}

TEST_CASE("sinkhorn: symmetry under swapping the measures") {
    Rng rng(7);
    Tensor X = Tensor::matrix(5, 2, rng.normal_vec(10));
    Tensor Y = Tensor::matrix(3, 2, rng.normal_vec(6));
    Tensor C = cost_matrix(X, Y);
    Tensor Ct = cost_matrix(Y, X);
    DiscreteMeasure a = random_measure(rng, 5), b = random_measure(rng, 3);
    auto r1 = sinkhorn(a, b, C, 0.1, 3000, 1e-12);
    auto r2 = sinkhorn(b, a, Ct, 0.1, 3000, 1e-12);
    CHECK(std::fabs(r1.distance - r2.distance) < 1e-10);
}

TEST_CASE("sinkhorn: marginal residual is non-increasing over iterations") {
    Rng rng(9);
    for (int rep = 0; rep < 5; ++rep) {
        Tensor X = Tensor::matrix(6, 2, rng.normal_vec(12));
        Tensor Y = Tensor::matrix(5, 2, rng.normal_vec(10));
        Tensor C = cost_matrix(X, Y);
        DiscreteMeasure a = random_measure(rng, 6), b = random_measure(rng, 5);
        auto r = sinkhorn(a, b, C, 0.02 * matrix_mean(C), 200, 0.0, true);
        for (std::size_t i = 1; i < r.residual_trace.size(); ++i)
            CHECK(r.residual_trace[i] <= r.residual_trace[i - 1] + 1e-12);
    }
}

TEST_CASE("sinkhorn: unconverged runs still return the achieved residual") {
    Rng rng(11);
    Tensor X = Tensor::matrix(6, 1, rng.normal_vec(6, 3.0));
    Tensor Y = Tensor::matrix(6, 1, rng.normal_vec(6, 3.0));
    Tensor C = cost_matrix(X, Y);
    auto r = sinkhorn(DiscreteMeasure::uniform(6), DiscreteMeasure::uniform(6), C,
                      1e-4 * matrix_mean(C), 3, 1e-14);
    CHECK_FALSE(r.converged);
    CHECK(r.marginal_residual > 0.0);
    CHECK(std::isfinite(r.distance));
}

TEST_CASE("exact ot: spec examples") {
    // identical diracs
    CHECK(exact_ot_small(DiscreteMeasure{{1.0}}, DiscreteMeasure{{1.0}},
                         Tensor::matrix(1, 1, {0.0})) == 0.0);

    // uniform on {0,1} vs uniform on {0,1}: identity assignment costs 0
    Tensor X = Tensor::matrix(2, 1, {0.0, 1.0});
    CHECK(exact_ot_small(DiscreteMeasure::uniform(2), DiscreteMeasure::uniform(2),
                         cost_matrix(X, X)) == 0.0);

    // uniform {0,2} vs {1,3}: the monotone assignment costs (1+1)/2 = 1
    Tensor A = Tensor::matrix(2, 1, {0.0, 2.0});
    Tensor B = Tensor::matrix(2, 1, {1.0, 3.0});
    CHECK(exact_ot_small(DiscreteMeasure::uniform(2), DiscreteMeasure::uniform(2),
                         cost_matrix(A, B)) == doctest::Approx(1.0));
}

TEST_CASE("exact ot: instance too large is rejected") {
    Tensor C = Tensor::zeros({9, 9});
    CHECK_THROWS(exact_ot_small(DiscreteMeasure::uniform(9), DiscreteMeasure::uniform(9), C));
}

TEST_CASE("exact ot: simplex solver agrees with assignment enumeration") {
    Rng rng(13);
    for (int rep = 0; rep < 20; ++rep) {
        std::size_t n = 2 + rng.below(5);
        Tensor X = Tensor::matrix(n, 2, rng.normal_vec(2 * n));
        Tensor Y = Tensor::matrix(n, 2, rng.normal_vec(2 * n));
        Tensor C = cost_matrix(X, Y);
        DiscreteMeasure u = DiscreteMeasure::uniform(n);
        double by_assignment = exact_ot_small(u, u, C);  // uniform path
        double by_simplex = transport::detail::transport_simplex(u.w, u.w, C);
        CHECK(by_simplex == doctest::Approx(by_assignment).epsilon(1e-10));
    }
}

TEST_CASE("exact ot: simplex solver agrees with the 1-D monotone coupling") {
    Rng rng(17);
    for (int rep = 0; rep < 20; ++rep) {
        std::size_t n = 2 + rng.below(6), m = 2 + rng.below(6);
        std::vector<double> xs = rng.uniform_vec(n, -3, 3), ys = rng.uniform_vec(m, -3, 3);
        DiscreteMeasure a = random_measure(rng, n), b = random_measure(rng, m);
        Tensor X = Tensor::matrix(n, 1, xs), Y = Tensor::matrix(m, 1, ys);
        double got = exact_ot_small(a, b, cost_matrix(X, Y));
        double want = monotone_1d_cost(xs, a.w, ys, b.w);
        CHECK(got == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("oracle agreement: sinkhorn at small eps within 2% of exact") {
    Rng rng(19);
    int tested = 0;
    for (int rep = 0; rep < 20; ++rep) {
        std::size_t n = 2 + rng.below(5), m = 2 + rng.below(5);
        Tensor X = Tensor::matrix(n, 2, rng.normal_vec(2 * n));
        Tensor Y = Tensor::matrix(m, 2, rng.normal_vec(2 * m));
        Tensor C = cost_matrix(X, Y);
        DiscreteMeasure a = random_measure(rng, n), b = random_measure(rng, m);
        double eps = 1e-3 * matrix_mean(C);
        auto r = sinkhorn(a, b, C, eps, 200000, 1e-12);
        double exact = exact_ot_small(a, b, C);
        CHECK(std::fabs(r.distance - exact) / std::max(exact, 1e-12) < 0.02);
        ++tested;
    }
    CHECK(tested == 20);
}

TEST_CASE("unrolled sinkhorn: matches the plain solver and differentiates") {
    Rng rng(23);
    Tensor X = Tensor::matrix(4, 2, rng.normal_vec(8));
    Tensor Y = Tensor::matrix(3, 2, rng.normal_vec(6));
    Tensor C = cost_matrix(X, Y);
    DiscreteMeasure a = random_measure(rng, 4), b = random_measure(rng, 3);

    int iters = 60;
    auto plain = sinkhorn(a, b, C, 0.2, iters, 0.0);

    Tape tape;
    Var av = tape.constant(Tensor::vector(a.w));
    Var bv = tape.param("b", Tensor::vector(b.w));
    Var Cv = tape.param("C", C);
    auto un = sinkhorn_unrolled(tape, av, bv, Cv, 0.2, iters);
    CHECK(tape.value(un.distance).value() == doctest::Approx(plain.distance).epsilon(1e-10));
    CHECK(un.marginal_residual == doctest::Approx(plain.marginal_residual).epsilon(1e-8));

    CHECK(hktest::fd_check(tape, un.distance, {bv, Cv}, 1e-6) < 1e-4);
}

TEST_CASE("sinkhorn: invalid inputs are rejected") {
    Tensor C = Tensor::matrix(1, 1, {1.0});
    DiscreteMeasure a{{1.0}};
    CHECK_THROWS(sinkhorn(a, a, C, 0.0));
    DiscreteMeasure bad{{0.5, 0.2}};
    CHECK_THROWS(sinkhorn(bad, a, C, 0.1));
    DiscreteMeasure neg{{1.5, -0.5}};
    CHECK_THROWS(neg.validate());
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "lindistill/gradcheck.hpp"
#include "lindistill/tensor.hpp"

using namespace lindistill;

namespace {

// Independent triple-loop product, no shared code with the library kernel.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  int m, int k, int n) {
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int kk = 0; kk < k; ++kk)
                s += a[static_cast<std::size_t>(i) * k + kk] * b[static_cast<std::size_t>(kk) * n + j];
            out[static_cast<std::size_t>(i) * n + j] = s;
        }
    return out;
}

} // namespace

TEST_CASE("matmul identity and annihilator") {
    Tensor i2 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor p = matmul(i2, i2);
    CHECK(p.at(0, 0) == 1.0);
    CHECK(p.at(0, 1) == 0.0);
    CHECK(p.at(1, 1) == 1.0);

    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor z = Tensor::zeros({2, 2});
    Tensor az = matmul(a, z);
    for (double v : az.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul random vs triple-loop oracle") {
    Rng rng(7);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({4, 2}, rng);
    Tensor c = matmul(a, b);
    const auto expect =
        matmul_oracle({a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()}, 3, 4, 2);
    for (std::size_t i = 0; i < expect.size(); ++i) {
        CHECK(c.data()[i] == doctest::Approx(expect[i]).epsilon(1e-14));
    }
}

TEST_CASE("matmul shape error names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("softmax_rows uniform, overflow, oracle") {
    Tensor u = softmax_rows(Tensor::zeros({1, 3}));
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

    Tensor big = softmax_rows(Tensor::from_data({1, 2}, {1000.0, 0.0}));
    CHECK(std::abs(big.data()[0] - 1.0) < 1e-12);
    CHECK(std::abs(big.data()[1]) < 1e-12);

    Tensor s = softmax_rows(Tensor::from_data({1, 3}, {1.0, 2.0, 3.0}));
    long double z = 0.0L;
    for (int i = 1; i <= 3; ++i) z += expl(static_cast<long double>(i));
    for (int i = 0; i < 3; ++i) {
        const long double want = expl(static_cast<long double>(i + 1)) / z;
        CHECK(std::abs(s.data()[static_cast<std::size_t>(i)] - static_cast<double>(want)) < 1e-15);
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::randn({rng.uniform_int(1, 6), rng.uniform_int(1, 6)}, rng, 3.0);
        Tensor y = softmax_rows(x);
        for (int i = 0; i < y.rows(); ++i) {
            double row = 0.0;
            for (int j = 0; j < y.cols(); ++j) {
                row += y.at(i, j);
                CHECK(y.at(i, j) >= 0.0);
                CHECK(y.at(i, j) <= 1.0);
            }
            CHECK(std::abs(row - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("softplus closed forms") {
    Tensor z = softplus(Tensor::scalar(0.0));
    CHECK(z.item() == doctest::Approx(0.6931471805599453).epsilon(1e-15));

    Tensor neg = softplus(Tensor::scalar(-50.0));
    CHECK(neg.item() > 0.0);
    CHECK(neg.item() == doctest::Approx(1.9287498479639178e-22).epsilon(1e-12));

    const long double oracle = logl(1.0L + expl(3.7L));
    Tensor v = softplus(Tensor::scalar(3.7));
    CHECK(std::abs(v.item() - static_cast<double>(oracle)) < 1e-15);
}

TEST_CASE("elementwise basics") {
    Rng rng(11);
    Tensor x = Tensor::randn({3, 3}, rng);
    Tensor y = add(x, Tensor::scalar(0.0));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.data()[i] == y.data()[i]);

    CHECK(mean(Tensor::from_data({3}, {1, 2, 3})).item() == 2.0);
    CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
    CHECK(gelu(Tensor::scalar(12.0)).item() == doctest::Approx(12.0).epsilon(1e-12));
    CHECK(gelu(Tensor::scalar(-12.0)).item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("broadcast only for identical shapes or scalar") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 2});
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(mul(a, Tensor::zeros({2, 1})), ShapeError);
    CHECK_NOTHROW(add(a, Tensor::scalar(1.0)));
    CHECK_NOTHROW(sub(Tensor::scalar(1.0), a));
}

TEST_CASE("non-finite outputs are an error surface") {
    CHECK_THROWS_AS(exp(Tensor::scalar(1000.0)), NonFiniteError);
    CHECK_THROWS_AS(div(Tensor::scalar(1.0), Tensor::scalar(0.0)), NonFiniteError);
    CHECK_THROWS_AS(sqrt(Tensor::scalar(-1.0)), NonFiniteError);
}

TEST_CASE("backward of sum gives ones, quadratic form gives x") {
    Rng rng(5);
    Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);
    {
        Graph g;
        Graph::RecordScope scope(g);
        g.backward(sum(x));
        for (double v : x.grad()) CHECK(v == 1.0);
    }
    x.zero_grad();
    {
        Graph g;
        Graph::RecordScope scope(g);
        g.backward(scale(sum(mul(x, x)), 0.5));
        for (std::size_t i = 0; i < x.numel(); ++i) {
            CHECK(x.grad()[i] == doctest::Approx(x.data()[i]).epsilon(1e-15));
        }
    }
}

TEST_CASE("repeated backward without reset accumulates") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Graph g;
    Graph::RecordScope scope(g);
    Tensor loss = sum(x);
    g.backward(loss);
    g.backward(loss);
    for (double v : x.grad()) CHECK(v == 2.0);
}

TEST_CASE("backward requires a scalar") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Graph g;
    Graph::RecordScope scope(g);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(g.backward(y), ShapeError);
}

TEST_CASE("fan-out accumulates both paths (vs finite differences)") {
    Rng rng(17);
    Tensor x = Tensor::randn({4, 4}, rng, 1.0, true);
    {
        Graph g;
        Graph::RecordScope scope(g);
        g.backward(add(sum(mul(x, x)), sum(x)));
    }
    const auto fd = finite_diff_grad(
        [&]() { return add(sum(mul(x, x)), sum(x)).item(); }, {x}, 1e-5);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double ga = x.grad()[i];
        CHECK(std::abs(ga - fd[0][i]) / std::max(1.0, std::abs(ga)) < 1e-6);
    }
}

TEST_CASE("primitive op gradients vs finite differences over 100 seeds") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto cases = run_gradcheck(seed, 1e-5, 1e-6, /*include_full_objective=*/false);
        if (!all_passed(cases)) {
            for (const auto& c : cases) {
                CAPTURE(seed);
                CAPTURE(c.name);
                CHECK(c.max_rel_err < 1e-6);
            }
        }
        CHECK(all_passed(cases));
    }
}

TEST_CASE("full-objective gradient check over 10 seeds") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto c = gradcheck_full_objective(seed, 1e-5, 1e-6);
        CAPTURE(seed);
        CHECK(c.pass);
    }
}

TEST_CASE("finite_diff_grad closed forms") {
    Tensor p = Tensor::scalar(3.0);
    auto g = finite_diff_grad([&]() { return p.data()[0] * p.data()[0]; }, {p}, 1e-5);
    CHECK(std::abs(g[0][0] - 6.0) < 1e-8);

    Tensor q = Tensor::scalar(0.0);
    auto gs = finite_diff_grad([&]() { return std::sin(q.data()[0]); }, {q}, 1e-5);
    CHECK(std::abs(gs[0][0] - 1.0) < 1e-8);
}

TEST_CASE("determinism: same seed, same stream") {
    Rng a(42), b(42);
    Tensor ta = Tensor::randn({4, 4}, a);
    Tensor tb = Tensor::randn({4, 4}, b);
    CHECK(std::memcmp(ta.data().data(), tb.data().data(), ta.numel() * sizeof(double)) == 0);
}

TEST_CASE("allocation accounting tracks live and peak bytes") {
    const auto before = alloc_stats().live_bytes;
    reset_peak_bytes();
    {
        Tensor t = Tensor::zeros({64, 64});
        CHECK(alloc_stats().live_bytes >= before + 64 * 64 * sizeof(double));
    }
    CHECK(alloc_stats().live_bytes == before);
    CHECK(alloc_stats().peak_bytes >= before + 64 * 64 * sizeof(double));
}

TEST_CASE("graph records carry op kinds in topological order") {
    Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
    Graph g;
    {
        Graph::RecordScope scope(g);
        Tensor y = mul(x, x);
        (void)sum(y);
    }
    REQUIRE(g.size() == 2);
    CHECK(g.records()[0].kind == OpKind::kMul);
    CHECK(g.records()[1].kind == OpKind::kSum);
    CHECK(g.records()[1].inputs[0].get() == g.records()[0].output.get());
}

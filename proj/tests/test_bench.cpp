#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <cmath>

#include "lindistill/bench.hpp"

using namespace lindistill;

namespace {

// Busy-spin for a fixed wall-clock interval; constant-time by construction.
Tensor spin_mixer(const Tensor& x, double seconds) {
    const auto deadline = std::chrono::steady_clock::now() +
                          std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                              std::chrono::duration<double>(seconds));
    volatile double sink = 0.0;
    while (std::chrono::steady_clock::now() < deadline) sink = sink + 1.0;
    (void)sink;
    return Tensor::zeros({x.rows(), x.cols()});
}

} // namespace

TEST_CASE("fit_exponent recovers quadratic and linear synthetic data exactly") {
    const std::vector<double> lengths{256, 512, 1024, 2048, 4096};
    std::vector<double> quad, lin;
    for (double L : lengths) {
        quad.push_back(3e-9 * L * L);
        lin.push_back(5e-7 * L);
    }
    const ScalingFit fq = fit_exponent_xy(lengths, quad);
    CHECK(fq.exponent == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(fq.r2 == doctest::Approx(1.0).epsilon(1e-12));
    const ScalingFit fl = fit_exponent_xy(lengths, lin);
    CHECK(fl.exponent == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fl.r2 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("fit_exponent preconditions") {
    CHECK_THROWS_AS(fit_exponent_xy({256, 512, 1024}, {1, 2, 3}), std::invalid_argument);
    CHECK_THROWS_AS(fit_exponent_xy({256, 512, 1024, 1500}, {1, 2, 3, 4}),
                    std::invalid_argument); // spans < 8x
    CHECK_NOTHROW(fit_exponent_xy({256, 512, 1024, 2048}, {1, 2, 3, 4}));
}

TEST_CASE("sweep argument validation") {
    const std::vector<int> ok{16, 32, 64, 128};
    auto stub = [](const Tensor& x) { return x.clone(); };
    CHECK_THROWS_AS(run_sweep_callable("s", stub, 8, ok, 5, 0), std::invalid_argument);
    CHECK_THROWS_AS(run_sweep_callable("s", stub, 8, {32, 16, 64, 128}, 11, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(run_sweep_callable("s", stub, 0, ok, 11, 0), std::invalid_argument);
    CHECK_NOTHROW(run_sweep_callable("s", stub, 8, ok, 11, 0));
}

TEST_CASE("constant-time stub has negligible IQR and unit self-speedup") {
    const std::vector<int> lengths{16, 32, 64, 128};
    auto stub = [](const Tensor& x) { return spin_mixer(x, 2e-3); };
    const auto a = run_sweep_callable("stub_a", stub, 8, lengths, 11, 0);
    const auto b = run_sweep_callable("stub_b", stub, 8, lengths, 11, 0);
    for (const BenchPoint& p : a) {
        CHECK(p.median_s == doctest::Approx(2e-3).epsilon(0.25));
        CHECK(p.iqr_s <= 0.2 * p.median_s);
    }
    for (const SpeedupRow& r : speedup_report(a, b)) {
        CHECK(r.ratio == doctest::Approx(1.0).epsilon(0.25));
    }
}

TEST_CASE("speedup_report rejects mismatched grids") {
    auto stub = [](const Tensor& x) { return x.clone(); };
    const auto a = run_sweep_callable("a", stub, 8, {16, 32, 64, 128}, 11, 0);
    const auto b = run_sweep_callable("b", stub, 8, {16, 32, 64, 256}, 11, 0);
    CHECK_THROWS_AS(speedup_report(a, b), std::invalid_argument);
}

TEST_CASE("attention transient memory includes the L x L buffer, scan stays flat") {
    const int d = 64;
    const std::vector<int> lengths{256, 512, 1024};
    const auto attn = run_sweep(MixerKind::kAttention, d, lengths, 11, 7);
    const auto scan = run_sweep(MixerKind::kMamba2, d, lengths, 11, 7);

    for (const BenchPoint& p : attn) {
        CHECK(p.transient_bytes >=
              static_cast<std::uint64_t>(p.seq_len) * static_cast<std::uint64_t>(p.seq_len) *
                  sizeof(double));
    }
    // quadratic growth between L and 2L
    CHECK(static_cast<double>(attn[2].transient_bytes) >=
          3.5 * static_cast<double>(attn[1].transient_bytes));

    // scan working set is L-independent up to small per-token buffers
    const double lo = static_cast<double>(scan.front().transient_bytes);
    const double hi = static_cast<double>(scan.back().transient_bytes);
    CHECK(hi <= 1.5 * lo);
    CHECK(scan.front().transient_bytes >=
          static_cast<std::uint64_t>(d) * static_cast<std::uint64_t>(d) * sizeof(double));
}

TEST_CASE("scan runtime per token is roughly flat (linearity witness)") {
    const int d = 48;
    const std::vector<int> lengths{128, 256, 512, 1024};
    const auto scan = run_sweep(MixerKind::kMamba2, d, lengths, 11, 3);
    double lo = 1e300, hi = 0.0;
    for (const BenchPoint& p : scan) {
        const double per_token = p.median_s / p.seq_len;
        lo = std::min(lo, per_token);
        hi = std::max(hi, per_token);
    }
    CHECK(hi <= 2.0 * lo);
}

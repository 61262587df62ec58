#pragma once

// Empirical verification of the linear-vs-quadratic claim: wall-clock and
// allocation-accounted working set of attention vs the recurrent scan as a
// function of sequence length, plus scaling-exponent fits and speedup ratios.

#include <functional>
#include <string>
#include <vector>

#include "lindistill/model.hpp"

namespace lindistill {

struct BenchPoint {
    std::string mixer;
    int seq_len = 0;
    int dim = 0;
    double median_s = 0.0;
    double iqr_s = 0.0;
    std::uint64_t transient_bytes = 0; // peak allocation beyond inputs and the output
};

struct ScalingFit {
    double exponent = 0.0; // OLS slope of log(runtime) on log(L)
    double r2 = 0.0;
};

struct SpeedupRow {
    int seq_len = 0;
    double ratio = 0.0; // attention runtime / scan runtime
};

// Deterministic inputs per (L, seed); >= 3 warmups then `reps` timed passes
// (median + IQR); timings exclude input construction. Single-threaded.
std::vector<BenchPoint> run_sweep(MixerKind kind, int dim, const std::vector<int>& lengths,
                                  int reps, std::uint64_t seed);

// Same harness with an injected mixer (stub mixers in tests).
std::vector<BenchPoint> run_sweep_callable(const std::string& name,
                                           const std::function<Tensor(const Tensor&)>& mixer,
                                           int dim, const std::vector<int>& lengths, int reps,
                                           std::uint64_t seed);

// Requires >= 4 distinct lengths spanning >= 8x.
ScalingFit fit_exponent(const std::vector<BenchPoint>& points);
ScalingFit fit_exponent_xy(const std::vector<double>& lengths, const std::vector<double>& runtimes);

std::vector<SpeedupRow> speedup_report(const std::vector<BenchPoint>& attention_points,
                                       const std::vector<BenchPoint>& scan_points);

void write_points_csv(const std::string& path, const std::vector<BenchPoint>& points);
void write_speedup_csv(const std::string& path, const std::vector<SpeedupRow>& rows);
void write_points_jsonl(const std::string& path, const std::vector<BenchPoint>& points);
void write_speedup_jsonl(const std::string& path, const std::vector<SpeedupRow>& rows);

} // namespace lindistill

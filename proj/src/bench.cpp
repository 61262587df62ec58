#include "lindistill/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "lindistill/mixers.hpp"

namespace lindistill {

namespace {

using Clock = std::chrono::steady_clock;

double percentile(std::vector<double> sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

void validate_sweep_args(const std::vector<int>& lengths, int reps, int dim) {
    if (dim < 1) throw std::invalid_argument("bench: dim must be >= 1");
    if (reps < 11) throw std::invalid_argument("bench: reps must be >= 11, got " + std::to_string(reps));
    if (lengths.empty()) throw std::invalid_argument("bench: empty length list");
    for (std::size_t i = 1; i < lengths.size(); ++i) {
        if (lengths[i] <= lengths[i - 1]) {
            throw std::invalid_argument("bench: lengths must be strictly ascending");
        }
    }
    if (lengths.front() < 1) throw std::invalid_argument("bench: lengths must be positive");
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

std::vector<BenchPoint> run_sweep_callable(const std::string& name,
                                           const std::function<Tensor(const Tensor&)>& mixer,
                                           int dim, const std::vector<int>& lengths, int reps,
                                           std::uint64_t seed) {
    validate_sweep_args(lengths, reps, dim);
    std::vector<BenchPoint> points;
    points.reserve(lengths.size());
    for (int L : lengths) {
        Rng rng(seed ^ (0xBE9C000ull + static_cast<std::uint64_t>(L)));
        Tensor x = Tensor::randn({L, dim}, rng, 1.0);

        for (int w = 0; w < 3; ++w) (void)mixer(x);

        // Working-set probe: peak allocation during one pass, minus what was
        // already live and minus the returned output buffer.
        std::uint64_t transient = 0;
        {
            const std::uint64_t live_before = alloc_stats().live_bytes;
            reset_peak_bytes();
            Tensor out = mixer(x);
            const std::uint64_t peak = alloc_stats().peak_bytes;
            const std::uint64_t out_bytes = out.numel() * sizeof(double);
            transient = peak - live_before;
            transient = transient > out_bytes ? transient - out_bytes : 0;
        }

        std::vector<double> times;
        times.reserve(static_cast<std::size_t>(reps));
        for (int r = 0; r < reps; ++r) {
            const auto t0 = Clock::now();
            Tensor out = mixer(x);
            const auto t1 = Clock::now();
            (void)out;
            times.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        std::sort(times.begin(), times.end());
        BenchPoint p;
        p.mixer = name;
        p.seq_len = L;
        p.dim = dim;
        p.median_s = percentile(times, 0.5);
        p.iqr_s = percentile(times, 0.75) - percentile(times, 0.25);
        p.transient_bytes = transient;
        points.push_back(std::move(p));
    }
    return points;
}

std::vector<BenchPoint> run_sweep(MixerKind kind, int dim, const std::vector<int>& lengths,
                                  int reps, std::uint64_t seed) {
    Rng prng(seed ^ 0x5117Aull);
    if (kind == MixerKind::kAttention) {
        const AttentionParams params = AttentionParams::init(dim, prng, 0.02, false);
        return run_sweep_callable(
            mixer_kind_name(kind),
            [params](const Tensor& x) { return attention_forward(x, params); }, dim, lengths,
            reps, seed);
    }
    const Mamba2Params params = Mamba2Params::init(dim, prng, 0.02, false);
    return run_sweep_callable(
        mixer_kind_name(kind), [params](const Tensor& x) { return mamba2_scan(x, params); }, dim,
        lengths, reps, seed);
}

ScalingFit fit_exponent_xy(const std::vector<double>& lengths,
                           const std::vector<double>& runtimes) {
    if (lengths.size() != runtimes.size() || lengths.size() < 4) {
        throw std::invalid_argument("fit_exponent: need >= 4 matched points, got " +
                                    std::to_string(lengths.size()));
    }
    const auto [lo, hi] = std::minmax_element(lengths.begin(), lengths.end());
    if (*lo <= 0.0 || *hi / *lo < 8.0) {
        throw std::invalid_argument("fit_exponent: lengths must span at least 8x");
    }
    const std::size_t n = lengths.size();
    std::vector<double> xs(n), ys(n);
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (runtimes[i] <= 0.0) throw std::invalid_argument("fit_exponent: non-positive runtime");
        xs[i] = std::log(lengths[i]);
        ys[i] = std::log(runtimes[i]);
        mx += xs[i];
        my += ys[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    ScalingFit fit;
    fit.exponent = sxy / sxx;
    if (syy == 0.0) {
        fit.r2 = 1.0; // exactly flat data is a perfect (constant) fit
    } else {
        const double ss_res = syy - sxy * sxy / sxx;
        fit.r2 = 1.0 - ss_res / syy;
    }
    return fit;
}

ScalingFit fit_exponent(const std::vector<BenchPoint>& points) {
    std::vector<double> ls, ts;
    ls.reserve(points.size());
    ts.reserve(points.size());
    for (const BenchPoint& p : points) {
        ls.push_back(static_cast<double>(p.seq_len));
        ts.push_back(p.median_s);
    }
    return fit_exponent_xy(ls, ts);
}

std::vector<SpeedupRow> speedup_report(const std::vector<BenchPoint>& attention_points,
                                       const std::vector<BenchPoint>& scan_points) {
    if (attention_points.size() != scan_points.size()) {
        throw std::invalid_argument("speedup_report: point counts differ");
    }
    std::vector<SpeedupRow> rows;
    rows.reserve(attention_points.size());
    for (std::size_t i = 0; i < attention_points.size(); ++i) {
        if (attention_points[i].seq_len != scan_points[i].seq_len) {
            throw std::invalid_argument("speedup_report: length grids differ at index " +
                                        std::to_string(i));
        }
        rows.push_back({attention_points[i].seq_len,
                        attention_points[i].median_s / scan_points[i].median_s});
    }
    return rows;
}

void write_points_csv(const std::string& path, const std::vector<BenchPoint>& points) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "mixer,L,d,median_s,iqr_s,transient_bytes\n";
    for (const BenchPoint& p : points) {
        out << p.mixer << "," << p.seq_len << "," << p.dim << "," << fmt_double(p.median_s) << ","
            << fmt_double(p.iqr_s) << "," << p.transient_bytes << "\n";
    }
}

void write_speedup_csv(const std::string& path, const std::vector<SpeedupRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "L,ratio\n";
    for (const SpeedupRow& r : rows) {
        out << r.seq_len << "," << fmt_double(r.ratio) << "\n";
    }
}

void write_points_jsonl(const std::string& path, const std::vector<BenchPoint>& points) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const BenchPoint& p : points) {
        nlohmann::json j{{"mixer", p.mixer},         {"L", p.seq_len},
                         {"d", p.dim},               {"median_s", p.median_s},
                         {"iqr_s", p.iqr_s},         {"transient_bytes", p.transient_bytes}};
        out << j.dump() << "\n";
    }
}

void write_speedup_jsonl(const std::string& path, const std::vector<SpeedupRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const SpeedupRow& r : rows) {
        nlohmann::json j{{"L", r.seq_len}, {"ratio", r.ratio}};
        out << j.dump() << "\n";
    }
}

} // namespace lindistill

// lindistill CLI: gradcheck, distill, bench, ablate.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "lindistill/bench.hpp"
#include "lindistill/gradcheck.hpp"
#include "lindistill/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using namespace lindistill;

std::string resolve_out(const std::string& out) {
    const char* root = std::getenv("LINDISTILL_OUT_ROOT");
    if (root != nullptr && root[0] != '\0' && !fs::path(out).is_absolute()) {
        return (fs::path(root) / out).string();
    }
    return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoull(item));
    }
    return out;
}

void require_manifest_subcommand(const Manifest& m, const std::string& expected) {
    if (m.subcommand != expected) {
        throw std::invalid_argument("manifest was written by '" + m.subcommand +
                                    "', not '" + expected + "'");
    }
}

int cmd_gradcheck(std::uint64_t seed, double eps, double tolerance, const std::string& out) {
    const auto cases = run_gradcheck(seed, eps, tolerance);
    std::printf("%-28s %-14s %s\n", "op", "max_rel_err", "status");
    for (const auto& c : cases) {
        std::printf("%-28s %-14.3e %s\n", c.name.c_str(), c.max_rel_err, c.pass ? "ok" : "FAIL");
    }
    const bool ok = all_passed(cases);
    if (!ok) {
        std::printf("failing ops:");
        for (const auto& c : cases) {
            if (!c.pass) std::printf(" %s", c.name.c_str());
        }
        std::printf("\n");
    }
    if (!out.empty()) {
        const std::string dir = resolve_out(out);
        std::vector<std::pair<std::string, std::string>> cfg{
            {"eps", std::to_string(eps)}, {"tolerance", std::to_string(tolerance)}};
        write_manifest(dir, "gradcheck", seed, cfg, {"gradcheck.csv"});
        std::ofstream csv(fs::path(dir) / "gradcheck.csv");
        csv << "op,max_rel_err,pass\n";
        char buf[40];
        for (const auto& c : cases) {
            std::snprintf(buf, sizeof(buf), "%.17g", c.max_rel_err);
            csv << c.name << "," << buf << "," << (c.pass ? "1" : "0") << "\n";
        }
    }
    return ok ? 0 : 1;
}

int cmd_distill(RunSetup setup, const std::string& out) {
    const std::string dir = resolve_out(out);
    const RunResult r = run_distill_pipeline(setup, dir);
    std::printf("distill: %d steps, loss %.6f -> %.6f, alignment %.4f -> %.4f\n", r.steps_run,
                r.first_loss, r.last_loss, r.first_alignment, r.last_alignment);
    std::printf("metrics:    %s\ncheckpoint: %s\n", r.metrics_path.c_str(),
                r.checkpoint_path.c_str());
    return 0;
}

int cmd_bench(int d, const std::vector<int>& lengths, int reps, std::uint64_t seed,
              const std::string& out, bool json) {
    if (lengths.size() < 4) {
        throw std::invalid_argument("bench: need at least 4 lengths for the exponent fit, got " +
                                    std::to_string(lengths.size()));
    }
    const std::string dir = resolve_out(out);
    std::vector<std::pair<std::string, std::string>> cfg;
    cfg.emplace_back("d", std::to_string(d));
    std::string lcsv;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (i) lcsv += ",";
        lcsv += std::to_string(lengths[i]);
    }
    cfg.emplace_back("lengths", lcsv);
    cfg.emplace_back("reps", std::to_string(reps));
    cfg.emplace_back("json", json ? "true" : "false");
    std::vector<std::string> artifacts{"bench.csv", "speedup.csv"};
    if (json) {
        artifacts.push_back("bench.jsonl");
        artifacts.push_back("speedup.jsonl");
    }
    write_manifest(dir, "bench", seed, cfg, artifacts);

    const auto attn = run_sweep(MixerKind::kAttention, d, lengths, reps, seed);
    const auto scan = run_sweep(MixerKind::kMamba2, d, lengths, reps, seed);
    const auto ratios = speedup_report(attn, scan);

    std::vector<BenchPoint> all = attn;
    all.insert(all.end(), scan.begin(), scan.end());
    write_points_csv((fs::path(dir) / "bench.csv").string(), all);
    write_speedup_csv((fs::path(dir) / "speedup.csv").string(), ratios);
    if (json) {
        write_points_jsonl((fs::path(dir) / "bench.jsonl").string(), all);
        write_speedup_jsonl((fs::path(dir) / "speedup.jsonl").string(), ratios);
    }

    const ScalingFit fa = fit_exponent(attn);
    const ScalingFit fsc = fit_exponent(scan);
    std::printf("attention: exponent %.3f (r2 %.4f)\n", fa.exponent, fa.r2);
    std::printf("mamba2:    exponent %.3f (r2 %.4f)\n", fsc.exponent, fsc.r2);
    for (const SpeedupRow& r : ratios) {
        std::printf("L=%-6d speedup %.2fx\n", r.seq_len, r.ratio);
    }
    return 0;
}

int cmd_ablate(const std::string& axis, RunSetup base, const std::vector<std::uint64_t>& seeds,
               const std::string& out) {
    const std::string dir = resolve_out(out);
    const auto rows = run_ablate_pipeline(axis, base, seeds, dir);
    std::printf("%-16s %-6s %-12s %s\n", "cell", "seed", "final_loss", "final_alignment");
    for (const AblateRow& r : rows) {
        std::printf("%-16s %-6llu %-12.6f %.4f\n", r.cell.c_str(),
                    static_cast<unsigned long long>(r.seed), r.final_loss, r.final_alignment);
    }
    std::printf("table: %s\n", (fs::path(dir) / "ablate.csv").string().c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-architecture distillation of quadratic attention into a linear-time "
                 "recurrent mixer, with a sequence-length scaling benchmark"};
    app.require_subcommand(1);

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference checks for every op and the "
                                               "full objective");
    std::uint64_t gc_seed = 0;
    double gc_eps = 1e-5, gc_tol = 1e-6;
    std::string gc_out;
    std::string gc_manifest;
    gc->add_option("--seed", gc_seed, "rng seed");
    gc->add_option("--eps", gc_eps, "central-difference step");
    gc->add_option("--tolerance", gc_tol, "max relative error accepted");
    gc->add_option("--out", gc_out, "optional output dir for gradcheck.csv + manifest");
    gc->add_option("--from-manifest", gc_manifest, "rerun from a manifest");

    // distill
    auto* di = app.add_subcommand("distill", "run the distillation (toy preset by default)");
    std::string di_config, di_data, di_out = "out/distill", di_manifest;
    std::vector<std::string> di_sets;
    int di_steps = -1;
    std::int64_t di_seed = -1;
    di->add_option("--config", di_config, "flat key=value config file");
    di->add_option("--data", di_data, "'synthetic' or a directory of .ppm images");
    di->add_option("--out", di_out, "output directory");
    di->add_option("--steps", di_steps, "override total steps");
    di->add_option("--seed", di_seed, "override seed");
    di->add_option("--set", di_sets, "extra key=value overrides")->take_all();
    di->add_option("--from-manifest", di_manifest, "rerun from a manifest");

    // bench
    auto* be = app.add_subcommand("bench", "attention vs scan runtime/memory sweep");
    int be_d = 64, be_reps = 11;
    std::string be_lengths = "256,512,1024,2048,4096";
    std::uint64_t be_seed = 0;
    std::string be_out = "out/bench", be_manifest;
    bool be_json = false;
    be->add_option("--d", be_d, "embedding dimension");
    be->add_option("--lengths", be_lengths, "comma-separated ascending sequence lengths");
    be->add_option("--reps", be_reps, "timed repetitions per point (>= 11)");
    be->add_option("--seed", be_seed, "rng seed");
    be->add_option("--out", be_out, "output directory");
    be->add_flag("--json", be_json, "also mirror records as JSON lines");
    be->add_option("--from-manifest", be_manifest, "rerun from a manifest");

    // ablate
    auto* ab = app.add_subcommand("ablate", "component/masking/scope ablation grids");
    std::string ab_axis = "components", ab_preset = "toy", ab_seeds = "0,1,2";
    std::string ab_out = "out/ablate", ab_manifest;
    int ab_steps = -1;
    ab->add_option("--axis", ab_axis, "components|mask_strategy|matching_scope");
    ab->add_option("--preset", ab_preset, "configuration preset (toy)");
    ab->add_option("--seeds", ab_seeds, "comma-separated seeds");
    ab->add_option("--steps", ab_steps, "override steps per cell");
    ab->add_option("--out", ab_out, "output directory");
    ab->add_option("--from-manifest", ab_manifest, "rerun from a manifest");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gc->parsed()) {
            if (!gc_manifest.empty()) {
                const Manifest m = read_manifest(gc_manifest);
                require_manifest_subcommand(m, "gradcheck");
                gc_seed = m.seed;
                for (const auto& [k, v] : m.config) {
                    if (k == "eps") gc_eps = std::stod(v);
                    if (k == "tolerance") gc_tol = std::stod(v);
                }
            }
            return cmd_gradcheck(gc_seed, gc_eps, gc_tol, gc_out);
        }
        if (di->parsed()) {
            RunSetup setup = toy_preset();
            if (!di_manifest.empty()) {
                const Manifest m = read_manifest(di_manifest);
                require_manifest_subcommand(m, "distill");
                for (const auto& [k, v] : m.config) apply_kv(setup, k, v);
            }
            if (!di_config.empty()) apply_config_file(setup, di_config);
            if (!di_data.empty()) apply_kv(setup, "data", di_data);
            if (di_steps >= 0) apply_kv(setup, "steps", std::to_string(di_steps));
            if (di_seed >= 0) apply_kv(setup, "seed", std::to_string(di_seed));
            for (const std::string& kv : di_sets) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) {
                    throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
                }
                apply_kv(setup, kv.substr(0, eq), kv.substr(eq + 1));
            }
            return cmd_distill(setup, di_out);
        }
        if (be->parsed()) {
            if (!be_manifest.empty()) {
                const Manifest m = read_manifest(be_manifest);
                require_manifest_subcommand(m, "bench");
                be_seed = m.seed;
                for (const auto& [k, v] : m.config) {
                    if (k == "d") be_d = std::stoi(v);
                    if (k == "lengths") be_lengths = v;
                    if (k == "reps") be_reps = std::stoi(v);
                    if (k == "json") be_json = (v == "true");
                }
            }
            return cmd_bench(be_d, parse_int_list(be_lengths), be_reps, be_seed, be_out, be_json);
        }
        if (ab->parsed()) {
            if (ab_preset != "toy") {
                throw std::invalid_argument("unknown preset '" + ab_preset + "' (only: toy)");
            }
            RunSetup base = toy_preset();
            std::vector<std::uint64_t> seeds = parse_seed_list(ab_seeds);
            std::string axis = ab_axis;
            if (!ab_manifest.empty()) {
                const Manifest m = read_manifest(ab_manifest);
                require_manifest_subcommand(m, "ablate");
                base.seed = m.seed;
                for (const auto& [k, v] : m.config) {
                    if (k == "axis") {
                        axis = v;
                    } else {
                        apply_kv(base, k, v);
                    }
                }
            }
            if (ab_steps >= 0) apply_kv(base, "steps", std::to_string(ab_steps));
            return cmd_ablate(axis, base, seeds, ab_out);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}

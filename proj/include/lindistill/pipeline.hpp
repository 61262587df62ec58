#pragma once

// End-to-end run plumbing shared by the CLI and tests: the resolved run
// configuration (flat key/value form), config files, manifests, and the
// distill/ablate orchestrations.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lindistill/distill.hpp"

namespace lindistill {

inline constexpr const char* kVersionString = "lindistill 0.1.0";

struct RunSetup {
    ModelConfig teacher;
    ModelConfig student;
    DistillConfig distill;
    std::string data = "synthetic";
    std::uint64_t seed = 0;
    int teacher_warmup_steps = 300;
    std::string teacher_checkpoint; // optional; overrides the warmup
};

// 32*32 images, 4-pixel patches (64 tokens), d=64, 4+4 blocks, K=2, a=0.75,
// lambda=1, 500 steps of batch 16 on synthetic data.
RunSetup toy_preset();

// Flat key/value codec for config files, flag overrides and manifests.
// Unknown keys and malformed values throw with the key named.
void apply_kv(RunSetup& setup, const std::string& key, const std::string& value);
std::vector<std::pair<std::string, std::string>> to_kv(const RunSetup& setup);

// `key = value` lines, '#' comments; applied on top of `setup`.
void apply_config_file(RunSetup& setup, const std::string& path);

// Manifest: written to <out_dir>/manifest.json before any compute.
std::string write_manifest(const std::string& out_dir, const std::string& subcommand,
                           std::uint64_t seed,
                           const std::vector<std::pair<std::string, std::string>>& config,
                           const std::vector<std::string>& artifacts);

struct Manifest {
    std::string subcommand;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> config;
};

Manifest read_manifest(const std::string& path);

// Builds both models (teacher warmup or checkpoint load included), freezes
// the teacher, runs the distillation, and writes manifest + metrics +
// checkpoint under out_dir.
RunResult run_distill_pipeline(const RunSetup& setup, const std::string& out_dir);

struct AblateRow {
    std::string cell;
    std::uint64_t seed = 0;
    int steps = 0;
    double final_loss = 0.0;
    double final_alignment = 0.0;
};

// Axes: components {mask_only, act_only, both}, mask_strategy {token_wise,
// block_wise}, matching_scope {class_only, visible_only, all}. One sub-run
// per cell and seed; rows end up in <out_dir>/ablate.csv.
std::vector<AblateRow> run_ablate_pipeline(const std::string& axis, const RunSetup& base,
                                           const std::vector<std::uint64_t>& seeds,
                                           const std::string& out_dir);

std::vector<std::string> ablate_cells(const std::string& axis);

} // namespace lindistill

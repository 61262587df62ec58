#include "lindistill/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

namespace lindistill {

namespace {

std::vector<int> offset_indices(const std::vector<int>& patch_indices, int offset) {
    std::vector<int> out;
    out.reserve(patch_indices.size());
    for (int i : patch_indices) out.push_back(i + offset);
    return out;
}

void assert_frozen(const Model& teacher) {
    Model& t = const_cast<Model&>(teacher);
    for (NamedParam& p : t.parameters()) {
        if (p.tensor.requires_grad()) {
            throw std::logic_error("teacher must be frozen (parameter '" + p.path +
                                   "' still requires grad)");
        }
    }
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

// ---------------------------------------------------------------------------
// Stage partitioning

StageMap stage_partition(int teacher_blocks, int student_blocks, int stages) {
    const int cap = std::min(teacher_blocks, student_blocks);
    if (stages < 1 || stages > cap) {
        throw std::invalid_argument("stage count K=" + std::to_string(stages) +
                                    " outside [1, min(M,N)=" + std::to_string(cap) + "]");
    }
    StageMap map;
    map.stages = stages;
    for (int k = 1; k <= stages; ++k) {
        map.teacher_taps.push_back((k * teacher_blocks + stages - 1) / stages);
        map.student_taps.push_back((k * student_blocks + stages - 1) / stages);
    }
    return map;
}

// ---------------------------------------------------------------------------
// Masking

const char* mask_strategy_name(MaskStrategy s) {
    return s == MaskStrategy::kTokenWise ? "token_wise" : "block_wise";
}

MaskStrategy mask_strategy_from_name(const std::string& name) {
    if (name == "token_wise") return MaskStrategy::kTokenWise;
    if (name == "block_wise") return MaskStrategy::kBlockWise;
    throw std::invalid_argument("unknown masking strategy '" + name +
                                "' (token_wise|block_wise)");
}

namespace {

void blockwise_fill(std::vector<char>& covered, int side, int target, Rng& rng) {
    int current = 0;
    int attempts = 0;
    const int max_block = std::max(16, side * side / 4);
    const double log_lo = std::log(0.3);
    const double log_hi = std::log(1.0 / 0.3);
    while (current < target) {
        if (++attempts > 10000) {
            // Degenerate grids only; finish deterministically.
            for (int i = 0; i < side * side && current < target; ++i) {
                if (!covered[static_cast<std::size_t>(i)]) {
                    covered[static_cast<std::size_t>(i)] = 1;
                    ++current;
                }
            }
            return;
        }
        const int remaining = target - current;
        const int area = remaining < 16 ? remaining
                                        : rng.uniform_int(16, std::min(remaining, max_block));
        const double aspect = std::exp(rng.uniform(log_lo, log_hi));
        int bh = static_cast<int>(std::lround(std::sqrt(area * aspect)));
        int bw = static_cast<int>(std::lround(std::sqrt(area / aspect)));
        bh = std::clamp(bh, 1, side);
        bw = std::clamp(bw, 1, side);
        const int top = rng.uniform_int(0, side - bh);
        const int left = rng.uniform_int(0, side - bw);
        for (int y = top; y < top + bh && current < target; ++y) {
            for (int x = left; x < left + bw && current < target; ++x) {
                char& cell = covered[static_cast<std::size_t>(y * side + x)];
                if (!cell) {
                    cell = 1;
                    ++current;
                }
            }
        }
    }
}

} // namespace

MaskSpec sample_mask(int patch_count, double ratio, MaskStrategy strategy, Rng& rng) {
    if (patch_count <= 0) throw std::invalid_argument("sample_mask: no patches");
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw std::invalid_argument("sample_mask: ratio must be in [0, 1]");
    }
    const int target = static_cast<int>(std::lround(ratio * patch_count));
    MaskSpec spec;
    spec.ratio = ratio;
    spec.strategy = strategy;
    if (strategy == MaskStrategy::kTokenWise) {
        std::vector<int> order(static_cast<std::size_t>(patch_count));
        for (int i = 0; i < patch_count; ++i) order[static_cast<std::size_t>(i)] = i;
        rng.shuffle(order);
        spec.masked.assign(order.begin(), order.begin() + target);
    } else {
        const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(patch_count))));
        if (side * side != patch_count) {
            throw std::invalid_argument("block-wise masking needs a square patch grid, got " +
                                        std::to_string(patch_count) + " patches");
        }
        std::vector<char> covered(static_cast<std::size_t>(patch_count), 0);
        blockwise_fill(covered, side, target, rng);
        for (int i = 0; i < patch_count; ++i) {
            if (covered[static_cast<std::size_t>(i)]) spec.masked.push_back(i);
        }
    }
    std::sort(spec.masked.begin(), spec.masked.end());
    std::vector<char> is_masked(static_cast<std::size_t>(patch_count), 0);
    for (int i : spec.masked) is_masked[static_cast<std::size_t>(i)] = 1;
    for (int i = 0; i < patch_count; ++i) {
        if (!is_masked[static_cast<std::size_t>(i)]) spec.visible.push_back(i);
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Activation maps and losses

ActivationMap activation_map(const Tensor& features, const std::vector<int>& scope_indices) {
    if (scope_indices.empty()) {
        throw std::invalid_argument("activation_map: scope must be nonempty");
    }
    Tensor sel = select_rows(features, scope_indices);
    Tensor sq_norms = row_sums(mul(sel, sel));
    for (std::size_t i = 0; i < sq_norms.numel(); ++i) {
        if (std::sqrt(sq_norms.data()[i]) <= 1e-12) {
            throw std::invalid_argument("activation_map: degenerate feature, token " +
                                        std::to_string(scope_indices[i]) + " has near-zero norm");
        }
    }
    Tensor unit = div_rows(sel, sqrt(sq_norms));
    ActivationMap map;
    map.values = matmul(unit, transpose(unit));
    Tensor vnorms = sqrt(row_sums(mul(map.values, map.values)));
    map.row_normalized = div_rows(map.values, vnorms);
    return map;
}

Tensor activation_matching_loss(const std::vector<ActivationMap>& teacher_maps,
                                const std::vector<ActivationMap>& student_maps) {
    if (teacher_maps.empty() || teacher_maps.size() != student_maps.size()) {
        throw std::invalid_argument("activation_matching_loss: stage count mismatch (" +
                                    std::to_string(teacher_maps.size()) + " vs " +
                                    std::to_string(student_maps.size()) + ")");
    }
    const double stages = static_cast<double>(teacher_maps.size());
    Tensor acc;
    for (std::size_t k = 0; k < teacher_maps.size(); ++k) {
        const Tensor& tea = teacher_maps[k].row_normalized;
        const Tensor& stu = student_maps[k].row_normalized;
        if (tea.shape() != stu.shape()) {
            throw ShapeError("activation_matching_loss: stage " + std::to_string(k) +
                             " maps disagree, " + shape_str(tea.shape()) + " vs " +
                             shape_str(stu.shape()));
        }
        // sum_i <tea(i,:), stu(i,:)> == elementwise product summed
        Tensor stage_ip = scale(sum(mul(tea, stu)), 1.0 / tea.rows());
        acc = k == 0 ? stage_ip : add(acc, stage_ip);
    }
    return sub(Tensor::scalar(1.0), scale(acc, 1.0 / stages));
}

Tensor masked_prediction_loss(const Tensor& y_tea, const Tensor& y_stu_projected,
                              const std::vector<int>& masked_rows, double beta) {
    if (masked_rows.empty()) {
        throw std::invalid_argument(
            "masked_prediction_loss: empty mask (a=0) leaves the loss undefined");
    }
    if (y_tea.shape() != y_stu_projected.shape()) {
        throw ShapeError("masked_prediction_loss: outputs disagree, " + shape_str(y_tea.shape()) +
                         " vs " + shape_str(y_stu_projected.shape()));
    }
    Tensor tea = select_rows(y_tea, masked_rows);
    Tensor stu = select_rows(y_stu_projected, masked_rows);
    Tensor elem = smooth_l1(stu, tea, beta);
    Tensor per_row = scale(row_sums(elem), 1.0 / elem.cols());
    return scale(sum(per_row), 1.0 / static_cast<double>(masked_rows.size()));
}

// ---------------------------------------------------------------------------
// Objective

const char* matching_scope_name(MatchingScope s) {
    switch (s) {
        case MatchingScope::kClassOnly: return "class_only";
        case MatchingScope::kVisibleOnly: return "visible_only";
        case MatchingScope::kAll: return "all";
    }
    return "?";
}

MatchingScope matching_scope_from_name(const std::string& name) {
    if (name == "class_only") return MatchingScope::kClassOnly;
    if (name == "visible_only") return MatchingScope::kVisibleOnly;
    if (name == "all") return MatchingScope::kAll;
    throw std::invalid_argument("unknown matching scope '" + name +
                                "' (class_only|visible_only|all)");
}

void DistillConfig::validate() const {
    if (!(lambda > 0.0)) throw std::invalid_argument("config: lambda must be positive");
    if (stages < 1) throw std::invalid_argument("config: stages must be >= 1");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) {
        throw std::invalid_argument("config: mask_ratio must be in [0, 1]");
    }
    if (!(smooth_l1_beta > 0.0)) throw std::invalid_argument("config: smooth_l1_beta must be positive");
    if (!use_act_loss && !use_mask_loss) {
        throw std::invalid_argument("config: at least one loss component must be enabled");
    }
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (optim.total_steps < 0 || optim.warmup_steps < 0) {
        throw std::invalid_argument("config: negative step counts");
    }
}

TeacherOutputs teacher_forward(const Model& teacher, const Tensor& patch_tokens,
                               const std::vector<int>& taps) {
    assert_frozen(teacher);
    ForwardResult r = forward(teacher, patch_tokens, nullptr, taps);
    return {r.final, r.stage_features};
}

namespace {

// 1 - cosine between the class-token features, averaged over stages.
Tensor class_only_loss(const std::vector<Tensor>& tea_stages, const std::vector<Tensor>& stu_stages) {
    const std::vector<int> cls{0};
    Tensor acc;
    for (std::size_t k = 0; k < tea_stages.size(); ++k) {
        Tensor t = select_rows(tea_stages[k], cls);
        Tensor s = select_rows(stu_stages[k], cls);
        Tensor tu = div_rows(t, sqrt(row_sums(mul(t, t))));
        Tensor su = div_rows(s, sqrt(row_sums(mul(s, s))));
        Tensor cos_k = sum(mul(tu, su));
        acc = k == 0 ? cos_k : add(acc, cos_k);
    }
    return sub(Tensor::scalar(1.0),
               scale(acc, 1.0 / static_cast<double>(tea_stages.size())));
}

} // namespace

LossBreakdown student_losses(const Model& student, const Tensor& patch_tokens,
                             const TeacherOutputs& teacher, const MaskSpec& mask,
                             const StageMap& stages, const DistillConfig& cfg) {
    if (static_cast<int>(teacher.stage_features.size()) != stages.stages) {
        throw std::invalid_argument("student_losses: teacher outputs carry " +
                                    std::to_string(teacher.stage_features.size()) +
                                    " stages, expected " + std::to_string(stages.stages));
    }
    ForwardResult stu = forward(student, patch_tokens, &mask.masked, stages.student_taps);
    const int offset = student.cfg.use_class_token ? 1 : 0;

    LossBreakdown out;
    Tensor l_act;
    if (cfg.use_act_loss) {
        if (cfg.scope == MatchingScope::kClassOnly) {
            if (!student.cfg.use_class_token) {
                throw std::invalid_argument("class_only matching requires a class token");
            }
            l_act = class_only_loss(teacher.stage_features, stu.stage_features);
        } else {
            std::vector<int> patch_scope;
            if (cfg.scope == MatchingScope::kAll) {
                patch_scope.resize(static_cast<std::size_t>(student.cfg.patch_tokens()));
                for (int i = 0; i < student.cfg.patch_tokens(); ++i) {
                    patch_scope[static_cast<std::size_t>(i)] = i;
                }
            } else {
                patch_scope = mask.visible;
            }
            if (patch_scope.empty()) {
                throw std::invalid_argument("activation matching scope is empty (mask ratio 1 "
                                            "with visible_only matching)");
            }
            const std::vector<int> seq = offset_indices(patch_scope, offset);
            std::vector<ActivationMap> tea_maps, stu_maps;
            tea_maps.reserve(teacher.stage_features.size());
            stu_maps.reserve(stu.stage_features.size());
            for (std::size_t k = 0; k < teacher.stage_features.size(); ++k) {
                tea_maps.push_back(activation_map(teacher.stage_features[k], seq));
                stu_maps.push_back(activation_map(stu.stage_features[k], seq));
            }
            l_act = activation_matching_loss(tea_maps, stu_maps);
        }
        out.l_act = l_act.item();
    }

    Tensor l_mask;
    // An empty mask only arises from ratio 0, where no positions were hidden
    // and the prediction term vanishes; the direct op still rejects it.
    const bool mask_active = cfg.use_mask_loss && !mask.masked.empty();
    if (mask_active) {
        if (!student.extras) {
            throw std::invalid_argument("masked prediction requires student extras (projection)");
        }
        Tensor projected = project_to_teacher(stu.final, *student.extras);
        l_mask = masked_prediction_loss(teacher.final, projected,
                                        offset_indices(mask.masked, offset), cfg.smooth_l1_beta);
        out.l_mask = l_mask.item();
    }

    if (cfg.use_act_loss && mask_active) {
        out.total = add(l_act, scale(l_mask, cfg.lambda));
    } else if (cfg.use_act_loss) {
        out.total = l_act;
    } else if (mask_active) {
        out.total = scale(l_mask, cfg.lambda);
    } else {
        throw std::invalid_argument("no active loss term (mask-only objective with mask ratio 0)");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer

AdamW::AdamW(std::vector<NamedParam> params, OptimConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const NamedParam& p : params_) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

double AdamW::lr_at(int step) const {
    if (cfg_.warmup_steps > 0 && step <= cfg_.warmup_steps) {
        return cfg_.peak_lr * static_cast<double>(step) / cfg_.warmup_steps;
    }
    const int span = cfg_.total_steps - cfg_.warmup_steps;
    if (span <= 0) return cfg_.peak_lr;
    const int s = std::min(step - cfg_.warmup_steps, span);
    const double t = static_cast<double>(s) / span;
    return cfg_.min_lr + 0.5 * (cfg_.peak_lr - cfg_.min_lr) * (1.0 + std::cos(3.141592653589793 * t));
}

double AdamW::apply(int step) {
    const double lr = lr_at(step);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step);
    double sq_norm = 0.0;
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& t = params_[pi].tensor;
        auto g = t.grad();
        if (g.empty()) continue;
        for (double gv : g) sq_norm += gv * gv;
        auto x = t.mutable_data();
        std::vector<double>& m = m_[pi];
        std::vector<double>& v = v_[pi];
        const double wd = params_[pi].decay ? cfg_.weight_decay : 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            x[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * x[i]);
        }
        t.zero_grad();
    }
    return std::sqrt(sq_norm);
}

// ---------------------------------------------------------------------------
// Training

StepMetrics train_step(Model& student, const Model& teacher, const std::vector<Tensor>& batch,
                       const StageMap& stages, const DistillConfig& cfg, AdamW& opt, int step,
                       Rng& mask_rng) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    assert_frozen(teacher);
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    StepMetrics metrics;
    for (const Tensor& tokens : batch) {
        const MaskSpec mask =
            sample_mask(student.cfg.patch_tokens(), cfg.mask_ratio, cfg.strategy, mask_rng);
        const TeacherOutputs tea = teacher_forward(teacher, tokens, stages.teacher_taps);
        Graph graph;
        Graph::RecordScope scope(graph);
        LossBreakdown lb = student_losses(student, tokens, tea, mask, stages, cfg);
        graph.backward(scale(lb.total, inv_b));
        metrics.loss += lb.total.item() * inv_b;
        metrics.l_act += lb.l_act * inv_b;
        metrics.l_mask += lb.l_mask * inv_b;
    }
    metrics.lr = opt.lr_at(step);
    metrics.grad_norm = opt.apply(step);
    return metrics;
}

double probe_alignment(const Model& teacher, const Model& student,
                       const std::vector<Tensor>& probe_tokens, const MaskSpec& probe_mask,
                       const StageMap& stages) {
    if (probe_tokens.empty()) throw std::invalid_argument("probe_alignment: empty probe batch");
    const int offset = student.cfg.use_class_token ? 1 : 0;
    const std::vector<int> seq = offset_indices(probe_mask.visible, offset);
    double total = 0.0;
    for (const Tensor& tokens : probe_tokens) {
        const TeacherOutputs tea = teacher_forward(teacher, tokens, stages.teacher_taps);
        ForwardResult stu = forward(student, tokens, &probe_mask.masked, stages.student_taps);
        std::vector<ActivationMap> tea_maps, stu_maps;
        for (std::size_t k = 0; k < tea.stage_features.size(); ++k) {
            tea_maps.push_back(activation_map(tea.stage_features[k], seq));
            stu_maps.push_back(activation_map(stu.stage_features[k], seq));
        }
        total += 1.0 - activation_matching_loss(tea_maps, stu_maps).item();
    }
    return total / static_cast<double>(probe_tokens.size());
}

RunResult distill_run(Model& student, const Model& teacher, const ImageSource& data,
                      const StageMap& stages, const DistillConfig& cfg,
                      const std::string& out_dir, std::uint64_t seed) {
    cfg.validate();
    check_distill_compat(teacher, student);
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    RunResult result;
    result.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    result.checkpoint_path = (fs::path(out_dir) / "student.ckpt.json").string();

    std::ofstream csv(result.metrics_path);
    if (!csv) throw std::runtime_error("cannot write metrics file: " + result.metrics_path);
    csv << "step,loss,l_act,l_mask,lr,alignment\n";

    Rng base(seed);
    Rng mask_rng = base.fork(1);
    Rng probe_rng = base.fork(2);

    // Held-fixed probe: first few images plus one fixed token-wise mask. The
    // probe policy is constant (ratio 0.75) so alignment stays comparable
    // across configs that train with different masking.
    std::vector<Tensor> probe_tokens;
    const int probe_n = std::max(1, cfg.probe_items);
    for (int i = 0; i < probe_n; ++i) {
        probe_tokens.push_back(
            patchify(data.image(static_cast<std::size_t>(i)), student.cfg.patch_size));
    }
    const MaskSpec probe_mask =
        sample_mask(student.cfg.patch_tokens(), 0.75, MaskStrategy::kTokenWise, probe_rng);
    if (probe_mask.visible.empty()) {
        throw std::invalid_argument("distill_run: probe needs at least one visible token");
    }

    AdamW opt(student.parameters(), cfg.optim);

    std::unordered_map<std::size_t, Tensor> token_cache;
    auto tokens_at = [&](std::size_t index) {
        const std::size_t key = index % data.size();
        auto it = token_cache.find(key);
        if (it != token_cache.end()) return it->second;
        Tensor t = patchify(data.image(key), student.cfg.patch_size);
        token_cache.emplace(key, t);
        return t;
    };

    bool first_logged = false;
    for (int step = 1; step <= cfg.optim.total_steps; ++step) {
        std::vector<Tensor> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            batch.push_back(tokens_at(static_cast<std::size_t>(step - 1) *
                                          static_cast<std::size_t>(cfg.batch_size) +
                                      static_cast<std::size_t>(b)));
        }
        StepMetrics metrics;
        try {
            metrics = train_step(student, teacher, batch, stages, cfg, opt, step, mask_rng);
        } catch (const NonFiniteError& e) {
            throw std::runtime_error("distill_run: aborted at step " + std::to_string(step) +
                                     ": " + e.what());
        }
        if (step % std::max(1, cfg.log_every) == 0 || step == cfg.optim.total_steps) {
            const double alignment = probe_alignment(teacher, student, probe_tokens, probe_mask, stages);
            csv << step << "," << fmt_double(metrics.loss) << "," << fmt_double(metrics.l_act)
                << "," << fmt_double(metrics.l_mask) << "," << fmt_double(metrics.lr) << ","
                << fmt_double(alignment) << "\n";
            if (!first_logged) {
                result.first_loss = metrics.loss;
                result.first_alignment = alignment;
                first_logged = true;
            }
            result.last_loss = metrics.loss;
            result.last_alignment = alignment;
        }
        result.steps_run = step;
    }
    if (!first_logged && cfg.optim.total_steps == 0) {
        // Empty run: log nothing, still expose the initial alignment.
        result.first_alignment = result.last_alignment =
            probe_alignment(teacher, student, probe_tokens, probe_mask, stages);
    }
    csv.flush();
    if (!csv) throw std::runtime_error("failed writing metrics file: " + result.metrics_path);
    save_checkpoint(student, result.checkpoint_path);
    return result;
}

namespace {

// Per-patch mean color (rows of a patchified image, (py, px, c) layout).
Tensor patch_color_targets(const Tensor& tokens, int channels) {
    const int rows = tokens.rows();
    const int pixels = tokens.cols() / channels;
    Tensor out = Tensor::zeros({rows, channels});
    const double* src = tokens.data().data();
    double* dst = out.mutable_data().data();
    for (int i = 0; i < rows; ++i) {
        for (int px = 0; px < pixels; ++px) {
            for (int ch = 0; ch < channels; ++ch) {
                dst[static_cast<std::size_t>(i) * channels + ch] +=
                    src[(static_cast<std::size_t>(i) * pixels + px) * channels + ch];
            }
        }
        for (int ch = 0; ch < channels; ++ch) {
            dst[static_cast<std::size_t>(i) * channels + ch] /= static_cast<double>(pixels);
        }
    }
    return out;
}

} // namespace

void supervised_warmup(Model& teacher, const ImageSource& data, int steps, int batch_size,
                       double lr, Rng& rng) {
    if (steps <= 0) return;
    teacher.cfg.validate();
    const int d = teacher.cfg.embed_dim;
    const int c = teacher.cfg.channels;
    // throwaway heads: every patch token regresses its own patch's mean
    // color, the class token regresses the image mean; both need the mixer
    // to aggregate context, which is what gives the teacher structured maps
    Tensor token_head_w = Tensor::randn({d, c}, rng, 0.05, true);
    Tensor token_head_b = Tensor::zeros({c}, true);
    Tensor cls_head_w = Tensor::randn({d, c}, rng, 0.05, true);
    Tensor cls_head_b = Tensor::zeros({c}, true);

    std::vector<NamedParam> params = teacher.parameters();
    params.push_back({"warmup_head.token_w", token_head_w, true});
    params.push_back({"warmup_head.token_b", token_head_b, false});
    params.push_back({"warmup_head.cls_w", cls_head_w, true});
    params.push_back({"warmup_head.cls_b", cls_head_b, false});
    OptimConfig oc;
    oc.peak_lr = lr;
    oc.min_lr = lr * 0.1;
    oc.weight_decay = 0.0;
    oc.warmup_steps = std::min(10, steps / 5);
    oc.total_steps = steps;
    AdamW opt(params, oc);

    const int offset = teacher.cfg.use_class_token ? 1 : 0;
    std::vector<int> patch_rows(static_cast<std::size_t>(teacher.cfg.patch_tokens()));
    for (std::size_t i = 0; i < patch_rows.size(); ++i) patch_rows[i] = static_cast<int>(i) + offset;

    const std::vector<int> no_taps;
    for (int step = 1; step <= steps; ++step) {
        const double inv_b = 1.0 / batch_size;
        for (int b = 0; b < batch_size; ++b) {
            const std::size_t idx = (static_cast<std::size_t>(step - 1) * batch_size + b) % data.size();
            Tensor tokens = patchify(data.image(idx), teacher.cfg.patch_size);
            Tensor token_targets = patch_color_targets(tokens, c);

            Graph graph;
            Graph::RecordScope scope(graph);
            ForwardResult r = forward(teacher, tokens, nullptr, no_taps);
            Tensor patch_feats = select_rows(r.final, patch_rows);
            Tensor token_pred = add_cols(matmul(patch_feats, token_head_w), token_head_b);
            Tensor token_diff = sub(token_pred, token_targets);
            Tensor loss = mean(mul(token_diff, token_diff));
            if (teacher.cfg.use_class_token) {
                std::vector<double> img_mean(static_cast<std::size_t>(c), 0.0);
                for (int i = 0; i < token_targets.rows(); ++i) {
                    for (int ch = 0; ch < c; ++ch) {
                        img_mean[static_cast<std::size_t>(ch)] += token_targets.at(i, ch);
                    }
                }
                for (double& v : img_mean) v /= token_targets.rows();
                Tensor cls = select_rows(r.final, {0});
                Tensor cls_pred = add_cols(matmul(cls, cls_head_w), cls_head_b);
                Tensor cls_diff = sub(cls_pred, Tensor::from_data({1, c}, img_mean));
                loss = add(loss, mean(mul(cls_diff, cls_diff)));
            }
            graph.backward(scale(loss, inv_b));
        }
        opt.apply(step);
    }
}

void check_distill_compat(const Model& teacher, const Model& student) {
    if (teacher.cfg.image_size != student.cfg.image_size ||
        teacher.cfg.patch_size != student.cfg.patch_size ||
        teacher.cfg.channels != student.cfg.channels) {
        throw std::invalid_argument("teacher and student must share image size, patch size and "
                                    "channels so token positions correspond");
    }
    if (teacher.cfg.use_class_token != student.cfg.use_class_token) {
        throw std::invalid_argument("teacher and student must agree on the class token");
    }
    if (!student.extras) {
        throw std::invalid_argument("student is missing extras (mask token and projection); call "
                                    "add_student_extras");
    }
    if (student.extras->projection.cols() != teacher.cfg.embed_dim) {
        throw std::invalid_argument("student projection maps to dim " +
                                    std::to_string(student.extras->projection.cols()) +
                                    ", teacher embeds dim " + std::to_string(teacher.cfg.embed_dim));
    }
}

} // namespace lindistill

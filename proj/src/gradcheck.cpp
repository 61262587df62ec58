#include "lindistill/gradcheck.hpp"

#include <cmath>
#include <functional>

#include "lindistill/data.hpp"
#include "lindistill/distill.hpp"
#include "lindistill/mixers.hpp"
#include "lindistill/model.hpp"
#include "lindistill/tensor.hpp"

namespace lindistill {

namespace {

// Backprop vs central differences for a scalar-valued builder over `params`.
GradCheckCase check_case(const std::string& name, const std::vector<Tensor>& params,
                         const std::function<Tensor()>& loss_fn, double eps, double tolerance) {
    for (Tensor p : params) p.zero_grad();
    {
        Graph graph;
        Graph::RecordScope scope(graph);
        graph.backward(loss_fn());
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params) {
        auto g = p.grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty()) analytic.back().assign(p.numel(), 0.0);
    }
    const auto fd = finite_diff_grad([&loss_fn]() { return loss_fn().item(); }, params, eps);

    GradCheckCase result;
    result.name = name;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::size_t i = 0; i < analytic[pi].size(); ++i) {
            const double ga = analytic[pi][i];
            const double rel = std::abs(ga - fd[pi][i]) / std::max(1.0, std::abs(ga));
            result.max_rel_err = std::max(result.max_rel_err, rel);
        }
    }
    result.pass = result.max_rel_err < tolerance;
    return result;
}

// Scalar probe so elementwise outputs exercise nontrivial output gradients.
Tensor probe(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

std::vector<int> rand_shape(Rng& rng) { return {rng.uniform_int(1, 6), rng.uniform_int(1, 6)}; }

Tensor rand_pos(const std::vector<int>& shape, Rng& rng, double lo = 0.5, double hi = 1.5) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
    return t;
}

} // namespace

GradCheckCase gradcheck_full_objective(std::uint64_t seed, double eps, double tolerance) {
    Rng rng(seed ^ 0xF0B1ull);

    ModelConfig tcfg;
    tcfg.embed_dim = 8;
    tcfg.mlp_dim = 16;
    tcfg.num_blocks = 2;
    tcfg.patch_size = 2;
    tcfg.image_size = 8;
    tcfg.channels = 1;
    tcfg.mixer = MixerKind::kAttention;
    ModelConfig scfg = tcfg;
    scfg.mixer = MixerKind::kMamba2;

    Model teacher = Model::init(tcfg, rng);
    teacher.set_trainable(false);
    Model student = Model::init(scfg, rng);
    student.add_student_extras(tcfg.embed_dim, rng);

    const StageMap stages = stage_partition(tcfg.num_blocks, scfg.num_blocks, 2);
    DistillConfig cfg;
    cfg.stages = 2;
    cfg.mask_ratio = 0.5;
    cfg.lambda = 1.0;
    cfg.scope = MatchingScope::kVisibleOnly;

    SyntheticSource images(tcfg.image_size, tcfg.channels, seed);
    const Tensor tokens = patchify(images.image(0), tcfg.patch_size);
    Rng mask_rng = rng.fork(3);
    const MaskSpec mask = sample_mask(scfg.patch_tokens(), cfg.mask_ratio, cfg.strategy, mask_rng);
    const TeacherOutputs tea = teacher_forward(teacher, tokens, stages.teacher_taps);

    std::vector<Tensor> params;
    for (NamedParam& p : student.parameters()) params.push_back(p.tensor);
    return check_case(
        "full_objective", params,
        [&]() { return student_losses(student, tokens, tea, mask, stages, cfg).total; }, eps,
        tolerance);
}

std::vector<GradCheckCase> run_gradcheck(std::uint64_t seed, double eps, double tolerance,
                                         bool include_full_objective) {
    std::vector<GradCheckCase> cases;
    Rng rng(seed);

    auto leaf = [&rng](std::vector<int> shape, double stddev = 1.0) {
        return Tensor::randn(std::move(shape), rng, stddev, true);
    };

    {
        const int m = rng.uniform_int(1, 6), k = rng.uniform_int(1, 6), n = rng.uniform_int(1, 6);
        Tensor a = leaf({m, k}), b = leaf({k, n});
        Tensor w = Tensor::randn({m, n}, rng);
        cases.push_back(check_case(
            "matmul", {a, b}, [&]() { return probe(matmul(a, b), w); }, eps, tolerance));
    }
    {
        Tensor a = leaf(rand_shape(rng));
        Tensor w = Tensor::randn({a.cols(), a.rows()}, rng);
        cases.push_back(check_case(
            "transpose", {a}, [&]() { return probe(transpose(a), w); }, eps, tolerance));
    }
    {
        Tensor a = leaf(rand_shape(rng));
        Tensor b = leaf(a.shape());
        Tensor w = Tensor::randn(a.shape(), rng);
        cases.push_back(check_case(
            "add", {a, b}, [&]() { return probe(add(a, b), w); }, eps, tolerance));
        cases.push_back(check_case(
            "sub", {a, b}, [&]() { return probe(sub(a, b), w); }, eps, tolerance));
        cases.push_back(check_case(
            "mul", {a, b}, [&]() { return probe(mul(a, b), w); }, eps, tolerance));
        Tensor s = leaf({1});
        cases.push_back(check_case(
            "add_scalar_broadcast", {a, s}, [&]() { return probe(add(a, s), w); }, eps, tolerance));
        cases.push_back(check_case(
            "mul_scalar_broadcast", {a, s}, [&]() { return probe(mul(s, a), w); }, eps, tolerance));
    }
    {
        Tensor a = leaf(rand_shape(rng));
        Tensor b = rand_pos(a.shape(), rng);
        b.set_requires_grad(true);
        Tensor w = Tensor::randn(a.shape(), rng);
        cases.push_back(check_case(
            "div", {a, b}, [&]() { return probe(div(a, b), w); }, eps, tolerance));
    }
    {
        Tensor a = leaf(rand_shape(rng));
        Tensor w = Tensor::randn(a.shape(), rng);
        cases.push_back(check_case(
            "scale", {a}, [&]() { return probe(scale(a, -1.7), w); }, eps, tolerance));
        cases.push_back(check_case(
            "exp", {a}, [&]() { return probe(exp(a), w); }, eps, tolerance));
        cases.push_back(check_case(
            "softplus", {a}, [&]() { return probe(softplus(a), w); }, eps, tolerance));
        cases.push_back(check_case(
            "gelu", {a}, [&]() { return probe(gelu(a), w); }, eps, tolerance));
    }
    {
        Tensor a = rand_pos(rand_shape(rng), rng, 0.2, 2.0);
        a.set_requires_grad(true);
        Tensor w = Tensor::randn(a.shape(), rng);
        cases.push_back(check_case(
            "sqrt", {a}, [&]() { return probe(sqrt(a), w); }, eps, tolerance));
    }
    {
        Tensor a = leaf(rand_shape(rng));
        Tensor w = Tensor::randn(a.shape(), rng);
        cases.push_back(check_case(
            "softmax_rows", {a}, [&]() { return probe(softmax_rows(a), w); }, eps, tolerance));
        cases.push_back(check_case(
            "sum", {a}, [&]() { return sum(a); }, eps, tolerance));
        cases.push_back(check_case(
            "mean", {a}, [&]() { return mean(a); }, eps, tolerance));
        Tensor wr = Tensor::randn({a.rows(), 1}, rng);
        cases.push_back(check_case(
            "row_sums", {a}, [&]() { return probe(row_sums(a), wr); }, eps, tolerance));
    }
    {
        Tensor a = leaf(rand_shape(rng));
        Tensor r = rand_pos({a.rows(), 1}, rng);
        r.set_requires_grad(true);
        Tensor w = Tensor::randn(a.shape(), rng);
        cases.push_back(check_case(
            "mul_rows", {a, r}, [&]() { return probe(mul_rows(a, r), w); }, eps, tolerance));
        cases.push_back(check_case(
            "div_rows", {a, r}, [&]() { return probe(div_rows(a, r), w); }, eps, tolerance));
        cases.push_back(check_case(
            "sub_rows", {a, r}, [&]() { return probe(sub_rows(a, r), w); }, eps, tolerance));
    }
    {
        Tensor a = leaf(rand_shape(rng));
        Tensor v = leaf({a.cols()});
        Tensor w = Tensor::randn(a.shape(), rng);
        cases.push_back(check_case(
            "mul_cols", {a, v}, [&]() { return probe(mul_cols(a, v), w); }, eps, tolerance));
        cases.push_back(check_case(
            "add_cols", {a, v}, [&]() { return probe(add_cols(a, v), w); }, eps, tolerance));
    }
    {
        Tensor a = leaf({5, 3});
        const std::vector<int> idx{4, 1, 1, 3}; // duplicate row exercises fan-in
        Tensor w = Tensor::randn({4, 3}, rng);
        cases.push_back(check_case(
            "select_rows", {a}, [&]() { return probe(select_rows(a, idx), w); }, eps, tolerance));
    }
    {
        Tensor a = leaf({2, 4}), b = leaf({3, 4}), c = leaf({1, 4});
        Tensor w = Tensor::randn({6, 4}, rng);
        cases.push_back(check_case(
            "concat_rows", {a, b, c}, [&]() { return probe(concat_rows({a, b, c}), w); }, eps,
            tolerance));
    }
    {
        Tensor a = leaf({3, 4});
        Tensor w = Tensor::randn({6, 2}, rng);
        cases.push_back(check_case(
            "reshape", {a}, [&]() { return probe(reshape(a, {6, 2}), w); }, eps, tolerance));
    }
    {
        Tensor a = leaf({5, 3});
        Tensor row = leaf({1, 3});
        const std::vector<int> idx{0, 2, 4};
        Tensor w = Tensor::randn({5, 3}, rng);
        cases.push_back(check_case(
            "substitute_rows", {a, row},
            [&]() { return probe(substitute_rows(a, idx, row), w); }, eps, tolerance));
    }
    {
        // keep |e| away from the beta kink where the derivative jumps
        const std::vector<int> shape = rand_shape(rng);
        Tensor a = Tensor::zeros(shape), b = Tensor::zeros(shape);
        auto av = a.mutable_data();
        auto bv = b.mutable_data();
        for (std::size_t i = 0; i < av.size(); ++i) {
            bv[i] = rng.normal();
            double e = 0.0;
            do {
                e = rng.uniform(-2.0, 2.0);
            } while (std::abs(std::abs(e) - 1.0) < 0.05);
            av[i] = bv[i] + e;
        }
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor w = Tensor::randn(shape, rng);
        cases.push_back(check_case(
            "smooth_l1", {a, b}, [&]() { return probe(smooth_l1(a, b, 1.0), w); }, eps,
            tolerance));
    }
    {
        // fan-out: x consumed by two paths, f = sum(x*x) + sum(x)
        Tensor x = leaf(rand_shape(rng));
        cases.push_back(check_case(
            "fanout_accumulation", {x}, [&]() { return add(sum(mul(x, x)), sum(x)); }, eps,
            tolerance));
    }
    {
        Tensor x = leaf({4, 6});
        Tensor gain = rand_pos({6}, rng);
        gain.set_requires_grad(true);
        Tensor bias = leaf({6}, 0.1);
        Tensor w = Tensor::randn({4, 6}, rng);
        cases.push_back(check_case(
            "layer_norm", {x, gain, bias},
            [&]() { return probe(layer_norm(x, gain, bias), w); }, eps, tolerance));
    }
    {
        const int d = 4, L = 5;
        Tensor x = leaf({L, d}, 0.8);
        AttentionParams p = AttentionParams::init(d, rng, 0.4);
        Tensor w = Tensor::randn({L, d}, rng);
        cases.push_back(check_case(
            "attention_forward", {x, p.w_q, p.w_k, p.w_v},
            [&]() { return probe(attention_forward(x, p), w); }, eps, tolerance));
    }
    {
        const int d = 3, L = 6;
        Tensor x = leaf({L, d}, 0.8);
        Mamba2Params p = Mamba2Params::init(d, rng, 0.4);
        Tensor w = Tensor::randn({L, d}, rng);
        cases.push_back(check_case(
            "mamba2_scan", {x, p.w_q, p.w_k, p.w_v, p.w_delta, p.alpha},
            [&]() { return probe(mamba2_scan(x, p), w); }, eps, tolerance));
    }
    {
        const int L = 6, d = 4;
        Tensor f_tea = leaf({L, d}, 0.9);
        f_tea.set_requires_grad(false);
        Tensor f_stu = leaf({L, d}, 0.9);
        const std::vector<int> scope{0, 2, 3, 5};
        cases.push_back(check_case(
            "activation_matching_loss", {f_stu},
            [&]() {
                std::vector<ActivationMap> tea{activation_map(f_tea, scope)};
                std::vector<ActivationMap> stu{activation_map(f_stu, scope)};
                return activation_matching_loss(tea, stu);
            },
            eps, tolerance));
    }
    {
        const int L = 6, d = 4;
        Tensor y_tea = leaf({L, d}, 1.0);
        y_tea.set_requires_grad(false);
        Tensor y_stu = leaf({L, d}, 1.0);
        const std::vector<int> masked{1, 3, 4};
        cases.push_back(check_case(
            "masked_prediction_loss", {y_stu},
            [&]() { return masked_prediction_loss(y_tea, y_stu, masked, 1.0); }, eps, tolerance));
    }

    if (include_full_objective) cases.push_back(gradcheck_full_objective(seed, eps, tolerance));
    return cases;
}

bool all_passed(const std::vector<GradCheckCase>& cases) {
    for (const GradCheckCase& c : cases) {
        if (!c.pass) return false;
    }
    return true;
}

} // namespace lindistill

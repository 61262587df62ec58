#pragma once

// Cross-architecture distillation: stage partitioning, activation maps, the
// activation-matching loss, mask sampling (token-wise and block-wise), the
// masked-prediction loss, the combined objective, and the training loop.

#include <string>
#include <vector>

#include "lindistill/data.hpp"
#include "lindistill/model.hpp"
#include "lindistill/tensor.hpp"

namespace lindistill {

// ---------------------------------------------------------------------------
// Stage partitioning

struct StageMap {
    int stages = 0;
    std::vector<int> teacher_taps; // 1-based block indices, strictly increasing
    std::vector<int> student_taps;
};

// Tap k sits after block ceil(k*M/K) (teacher) and ceil(k*N/K) (student).
StageMap stage_partition(int teacher_blocks, int student_blocks, int stages);

// ---------------------------------------------------------------------------
// Masking

enum class MaskStrategy { kTokenWise, kBlockWise };

const char* mask_strategy_name(MaskStrategy s);
MaskStrategy mask_strategy_from_name(const std::string& name);

struct MaskSpec {
    double ratio = 0.0;
    MaskStrategy strategy = MaskStrategy::kTokenWise;
    std::vector<int> masked;  // sorted patch indices, |masked| = round(ratio * patch_count)
    std::vector<int> visible; // sorted complement
};

// Token-wise: uniform sample without replacement. Block-wise: rectangular
// blocks on the (square) patch grid, aspect in [0.3, 1/0.3], area >= 16
// patches or the remainder, trimmed so the masked count is exact.
MaskSpec sample_mask(int patch_count, double ratio, MaskStrategy strategy, Rng& rng);

// ---------------------------------------------------------------------------
// Activation maps and losses

struct ActivationMap {
    Tensor values;         // L'*L' pairwise cosines over the scoped tokens
    Tensor row_normalized; // per-row l2-normalized variant
};

ActivationMap activation_map(const Tensor& features, const std::vector<int>& scope_indices);

// Mean over stages and rows of 1 - <row_norm(A_tea), row_norm(A_stu)>; the
// per-stage normalizer is that map's row count.
Tensor activation_matching_loss(const std::vector<ActivationMap>& teacher_maps,
                                const std::vector<ActivationMap>& student_maps);

// Smooth-L1 between teacher and projected student rows at the masked
// positions, mean over features per row, summed and normalized by the masked
// row count. Rows are sequence indices; grads at visible rows are exactly 0.
Tensor masked_prediction_loss(const Tensor& y_tea, const Tensor& y_stu_projected,
                              const std::vector<int>& masked_rows, double beta);

// ---------------------------------------------------------------------------
// Objective configuration

enum class MatchingScope { kClassOnly, kVisibleOnly, kAll };

const char* matching_scope_name(MatchingScope s);
MatchingScope matching_scope_from_name(const std::string& name);

struct OptimConfig {
    double peak_lr = 1e-3;
    double min_lr = 1e-5;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int warmup_steps = 25;
    int total_steps = 500;
};

struct DistillConfig {
    double lambda = 1.0;      // weight of the masked-prediction term
    int stages = 4;           // K
    double mask_ratio = 0.75; // a
    MaskStrategy strategy = MaskStrategy::kTokenWise;
    MatchingScope scope = MatchingScope::kVisibleOnly;
    double smooth_l1_beta = 1.0;
    bool use_act_loss = true;
    bool use_mask_loss = true;

    OptimConfig optim;
    int batch_size = 16;
    int log_every = 1;
    int probe_items = 2;

    void validate() const;
};

// ---------------------------------------------------------------------------
// Objective

struct TeacherOutputs {
    Tensor final;
    std::vector<Tensor> stage_features;
};

// Unmasked, gradient-free teacher pass. Throws if the teacher is trainable.
TeacherOutputs teacher_forward(const Model& teacher, const Tensor& patch_tokens,
                               const std::vector<int>& taps);

struct LossBreakdown {
    Tensor total;      // differentiable w.r.t. student parameters only
    double l_act = 0.0;
    double l_mask = 0.0;
};

LossBreakdown student_losses(const Model& student, const Tensor& patch_tokens,
                             const TeacherOutputs& teacher, const MaskSpec& mask,
                             const StageMap& stages, const DistillConfig& cfg);

// ---------------------------------------------------------------------------
// Optimizer

class AdamW {
public:
    AdamW(std::vector<NamedParam> params, OptimConfig cfg);
    double lr_at(int step) const; // linear warmup then cosine decay, 1-based
    // Applies one update from the accumulated grads, zeroes them, and returns
    // the pre-update global gradient norm.
    double apply(int step);

private:
    std::vector<NamedParam> params_;
    OptimConfig cfg_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

// ---------------------------------------------------------------------------
// Training

struct StepMetrics {
    double loss = 0.0;
    double l_act = 0.0;
    double l_mask = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
};

StepMetrics train_step(Model& student, const Model& teacher, const std::vector<Tensor>& batch,
                       const StageMap& stages, const DistillConfig& cfg, AdamW& opt, int step,
                       Rng& mask_rng);

// Mean over stages and visible probe rows of the row-normalized activation
// inner product (equals 1 - activation_matching_loss on the probe).
double probe_alignment(const Model& teacher, const Model& student,
                       const std::vector<Tensor>& probe_tokens, const MaskSpec& probe_mask,
                       const StageMap& stages);

struct RunResult {
    std::string metrics_path;
    std::string checkpoint_path;
    int steps_run = 0;
    double first_loss = 0.0;
    double last_loss = 0.0;
    double first_alignment = 0.0;
    double last_alignment = 0.0;
};

// Writes metrics.csv (header step,loss,l_act,l_mask,lr,alignment) and a final
// student checkpoint under out_dir. Deterministic for a fixed seed.
RunResult distill_run(Model& student, const Model& teacher, const ImageSource& data,
                      const StageMap& stages, const DistillConfig& cfg,
                      const std::string& out_dir, std::uint64_t seed);

// Brief supervised warmup for a locally trained teacher: regress the image's
// per-channel mean from the class-token feature through a throwaway head.
void supervised_warmup(Model& teacher, const ImageSource& data, int steps, int batch_size,
                       double lr, Rng& rng);

void check_distill_compat(const Model& teacher, const Model& student);

} // namespace lindistill

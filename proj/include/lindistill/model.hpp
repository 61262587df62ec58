#pragma once

// Plain (non-hierarchical) teacher and student networks: patch embedding,
// alternating token-mixer / channel-mixer blocks with pre-normalization and
// residuals, optional class token at index 0, learnable [mask] token for the
// student, and the student-to-teacher projection.

#include <optional>
#include <string>
#include <vector>

#include "lindistill/mixers.hpp"
#include "lindistill/tensor.hpp"

namespace lindistill {

enum class MixerKind { kAttention, kMamba2 };

const char* mixer_kind_name(MixerKind kind);
MixerKind mixer_kind_from_name(const std::string& name);

struct ModelConfig {
    int embed_dim = 64;
    int mlp_dim = 128;
    int num_blocks = 4;
    int patch_size = 4;
    int image_size = 32;
    int channels = 3;
    MixerKind mixer = MixerKind::kAttention;
    bool use_class_token = true;
    // paper-scale nets keep the conventional 0.02; the toy preset widens it
    // so blocks transform features instead of staying near-identity
    double init_std = 0.02;

    int grid() const { return image_size / patch_size; }
    int patch_tokens() const { return grid() * grid(); }
    int seq_len() const { return patch_tokens() + (use_class_token ? 1 : 0); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    void validate() const;
};

// Reference configurations (paper-scale shapes are expressible even though
// desk-scale runs use the toy preset).
ModelConfig vit_base_config();
ModelConfig recurrent_base_config();

struct BlockParams {
    Tensor norm1_gain, norm1_bias;
    std::optional<AttentionParams> attn;
    std::optional<Mamba2Params> mamba;
    Tensor norm2_gain, norm2_bias;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct StudentExtras {
    Tensor mask_token; // 1*d, substituted at every masked patch position
    Tensor projection; // d_stu*d_tea, applied before the masked-prediction loss
};

struct NamedParam {
    std::string path;
    Tensor tensor;
    bool decay; // participates in weight decay
};

struct Model {
    ModelConfig cfg;
    Tensor patch_embed_w; // patch_dim*d
    Tensor patch_embed_b; // d
    Tensor pos_embed;     // seq_len*d
    Tensor class_token;   // 1*d when enabled
    std::vector<BlockParams> blocks;
    Tensor final_norm_gain, final_norm_bias; // head-side norm after the last block
    std::optional<StudentExtras> extras;

    static Model init(const ModelConfig& cfg, Rng& rng);
    void add_student_extras(int teacher_dim, Rng& rng);

    // Stable ordering; paths like "blocks.2.mixer.w_q".
    std::vector<NamedParam> parameters();
    void set_trainable(bool trainable);
};

struct ForwardResult {
    Tensor final;                       // seq_len*d
    std::vector<Tensor> stage_features; // one per tap, each seq_len*d
};

// Row-major patch extraction: image is H*W*C, output row i is the flattened
// patch (py, px, c order) for patch i counted top-left to bottom-right.
Tensor patchify(const Tensor& image, int patch_size);

// masked_patches are patch indices (class token excluded and never maskable);
// pass nullptr for an unmasked forward. stage_taps are 1-based block indices.
ForwardResult forward(const Model& m, const Tensor& patch_tokens,
                      const std::vector<int>* masked_patches,
                      const std::vector<int>& stage_taps);

Tensor project_to_teacher(const Tensor& y_stu, const StudentExtras& extras);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);

// Checkpoint: JSON map from parameter path to shape + values, with the model
// config alongside. Doubles round-trip exactly.
void save_checkpoint(Model& m, const std::string& path);
void load_checkpoint(Model& m, const std::string& path);

} // namespace lindistill

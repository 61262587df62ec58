#include "lindistill/model.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace lindistill {

const char* mixer_kind_name(MixerKind kind) {
    return kind == MixerKind::kAttention ? "attention" : "mamba2";
}

MixerKind mixer_kind_from_name(const std::string& name) {
    if (name == "attention") return MixerKind::kAttention;
    if (name == "mamba2") return MixerKind::kMamba2;
    throw std::invalid_argument("unknown mixer kind '" + name + "' (attention|mamba2)");
}

void ModelConfig::validate() const {
    if (embed_dim <= 0 || mlp_dim <= 0 || num_blocks < 0 || channels <= 0) {
        throw std::invalid_argument("model config: non-positive dimension");
    }
    if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0) {
        throw std::invalid_argument("model config: image_size " + std::to_string(image_size) +
                                    " not divisible by patch_size " + std::to_string(patch_size));
    }
}

ModelConfig vit_base_config() {
    ModelConfig c;
    c.embed_dim = 768;
    c.mlp_dim = 3072;
    c.num_blocks = 12;
    c.patch_size = 16;
    c.image_size = 224;
    c.mixer = MixerKind::kAttention;
    return c;
}

ModelConfig recurrent_base_config() {
    ModelConfig c;
    c.embed_dim = 768;
    c.mlp_dim = 1920;
    c.num_blocks = 12;
    c.patch_size = 16;
    c.image_size = 224;
    c.mixer = MixerKind::kMamba2;
    return c;
}

Model Model::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const int d = cfg.embed_dim;
    const double std = cfg.init_std;
    m.patch_embed_w = Tensor::randn({cfg.patch_dim(), d}, rng, std, true);
    m.patch_embed_b = Tensor::zeros({d}, true);
    m.pos_embed = Tensor::randn({cfg.seq_len(), d}, rng, std, true);
    if (cfg.use_class_token) m.class_token = Tensor::randn({1, d}, rng, std, true);
    m.final_norm_gain = Tensor::full({d}, 1.0, true);
    m.final_norm_bias = Tensor::zeros({d}, true);
    m.blocks.reserve(static_cast<std::size_t>(cfg.num_blocks));
    for (int b = 0; b < cfg.num_blocks; ++b) {
        BlockParams blk;
        blk.norm1_gain = Tensor::full({d}, 1.0, true);
        blk.norm1_bias = Tensor::zeros({d}, true);
        if (cfg.mixer == MixerKind::kAttention) {
            blk.attn = AttentionParams::init(d, rng, std);
        } else {
            blk.mamba = Mamba2Params::init(d, rng, std);
        }
        blk.norm2_gain = Tensor::full({d}, 1.0, true);
        blk.norm2_bias = Tensor::zeros({d}, true);
        blk.mlp_w1 = Tensor::randn({d, cfg.mlp_dim}, rng, std, true);
        blk.mlp_b1 = Tensor::zeros({cfg.mlp_dim}, true);
        blk.mlp_w2 = Tensor::randn({cfg.mlp_dim, d}, rng, std, true);
        blk.mlp_b2 = Tensor::zeros({d}, true);
        m.blocks.push_back(std::move(blk));
    }
    return m;
}

void Model::add_student_extras(int teacher_dim, Rng& rng) {
    StudentExtras e;
    e.mask_token = Tensor::randn({1, cfg.embed_dim}, rng, cfg.init_std, true);
    e.projection = Tensor::randn({cfg.embed_dim, teacher_dim}, rng, cfg.init_std, true);
    extras = std::move(e);
}

std::vector<NamedParam> Model::parameters() {
    std::vector<NamedParam> out;
    out.push_back({"patch_embed.weight", patch_embed_w, true});
    out.push_back({"patch_embed.bias", patch_embed_b, false});
    out.push_back({"pos_embed", pos_embed, false});
    if (cfg.use_class_token) out.push_back({"class_token", class_token, false});
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const std::string pre = "blocks." + std::to_string(b) + ".";
        BlockParams& blk = blocks[b];
        out.push_back({pre + "norm1.gain", blk.norm1_gain, false});
        out.push_back({pre + "norm1.bias", blk.norm1_bias, false});
        if (blk.attn) {
            out.push_back({pre + "mixer.w_q", blk.attn->w_q, true});
            out.push_back({pre + "mixer.w_k", blk.attn->w_k, true});
            out.push_back({pre + "mixer.w_v", blk.attn->w_v, true});
        }
        if (blk.mamba) {
            out.push_back({pre + "mixer.w_q", blk.mamba->w_q, true});
            out.push_back({pre + "mixer.w_k", blk.mamba->w_k, true});
            out.push_back({pre + "mixer.w_v", blk.mamba->w_v, true});
            out.push_back({pre + "mixer.w_delta", blk.mamba->w_delta, false});
            out.push_back({pre + "mixer.alpha", blk.mamba->alpha, false});
        }
        out.push_back({pre + "norm2.gain", blk.norm2_gain, false});
        out.push_back({pre + "norm2.bias", blk.norm2_bias, false});
        out.push_back({pre + "mlp.w1", blk.mlp_w1, true});
        out.push_back({pre + "mlp.b1", blk.mlp_b1, false});
        out.push_back({pre + "mlp.w2", blk.mlp_w2, true});
        out.push_back({pre + "mlp.b2", blk.mlp_b2, false});
    }
    out.push_back({"final_norm.gain", final_norm_gain, false});
    out.push_back({"final_norm.bias", final_norm_bias, false});
    if (extras) {
        out.push_back({"extras.mask_token", extras->mask_token, false});
        out.push_back({"extras.projection", extras->projection, true});
    }
    return out;
}

void Model::set_trainable(bool trainable) {
    for (NamedParam& p : parameters()) p.tensor.set_requires_grad(trainable);
}

Tensor patchify(const Tensor& image, int patch_size) {
    if (image.shape().size() != 3) {
        throw ShapeError("patchify: expected an H*W*C image, got " + shape_str(image.shape()));
    }
    const int h = image.shape()[0], w = image.shape()[1], c = image.shape()[2];
    if (patch_size <= 0 || h % patch_size != 0 || w % patch_size != 0) {
        throw ShapeError("patchify: image " + shape_str(image.shape()) +
                         " not divisible by patch size " + std::to_string(patch_size));
    }
    const int gy = h / patch_size, gx = w / patch_size;
    const int pd = patch_size * patch_size * c;
    Tensor out = detail::make_tensor({gy * gx, pd});
    const double* src = image.data().data();
    double* dst = out.mutable_data().data();
    for (int by = 0; by < gy; ++by) {
        for (int bx = 0; bx < gx; ++bx) {
            double* row = dst + static_cast<std::size_t>(by * gx + bx) * pd;
            std::size_t o = 0;
            for (int py = 0; py < patch_size; ++py) {
                const int y = by * patch_size + py;
                for (int px = 0; px < patch_size; ++px) {
                    const int x = bx * patch_size + px;
                    const double* pix = src + (static_cast<std::size_t>(y) * w + x) * c;
                    for (int ch = 0; ch < c; ++ch) row[o++] = pix[ch];
                }
            }
        }
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const double inv_d = 1.0 / static_cast<double>(x.cols());
    Tensor mu = scale(row_sums(x), inv_d);
    Tensor centered = sub_rows(x, mu);
    Tensor var = scale(row_sums(mul(centered, centered)), inv_d);
    Tensor sd = sqrt(add(var, Tensor::scalar(eps)));
    return add_cols(mul_cols(div_rows(centered, sd), gain), bias);
}

namespace {

Tensor block_forward(const Tensor& x, const BlockParams& blk, MixerKind kind) {
    Tensor n1 = layer_norm(x, blk.norm1_gain, blk.norm1_bias);
    Tensor mixed = kind == MixerKind::kAttention ? attention_forward(n1, *blk.attn)
                                                 : mamba2_scan(n1, *blk.mamba);
    Tensor h = add(x, mixed);
    Tensor n2 = layer_norm(h, blk.norm2_gain, blk.norm2_bias);
    Tensor up = gelu(add_cols(matmul(n2, blk.mlp_w1), blk.mlp_b1));
    Tensor down = add_cols(matmul(up, blk.mlp_w2), blk.mlp_b2);
    return add(h, down);
}

} // namespace

ForwardResult forward(const Model& m, const Tensor& patch_tokens,
                      const std::vector<int>* masked_patches,
                      const std::vector<int>& stage_taps) {
    const ModelConfig& cfg = m.cfg;
    if (patch_tokens.shape().size() != 2 || patch_tokens.rows() != cfg.patch_tokens() ||
        patch_tokens.cols() != cfg.patch_dim()) {
        throw ShapeError("forward: patch tokens " + shape_str(patch_tokens.shape()) +
                         " do not match config (expected [" + std::to_string(cfg.patch_tokens()) +
                         "x" + std::to_string(cfg.patch_dim()) + "])");
    }
    Tensor embedded = add_cols(matmul(patch_tokens, m.patch_embed_w), m.patch_embed_b);
    if (masked_patches != nullptr && !masked_patches->empty()) {
        if (!m.extras) {
            throw std::invalid_argument("forward: mask provided to a model without a mask token");
        }
        for (int idx : *masked_patches) {
            if (idx < 0 || idx >= cfg.patch_tokens()) {
                throw std::invalid_argument("forward: masked patch index " + std::to_string(idx) +
                                            " out of range");
            }
        }
        embedded = substitute_rows(embedded, *masked_patches, m.extras->mask_token);
    }
    if (cfg.use_class_token) embedded = concat_rows({m.class_token, embedded});
    Tensor h = add(embedded, m.pos_embed);

    ForwardResult res;
    res.stage_features.reserve(stage_taps.size());
    std::size_t tap_pos = 0;
    for (int b = 1; b <= cfg.num_blocks; ++b) {
        h = block_forward(h, m.blocks[static_cast<std::size_t>(b - 1)], cfg.mixer);
        while (tap_pos < stage_taps.size() && stage_taps[tap_pos] == b) {
            res.stage_features.push_back(h);
            ++tap_pos;
        }
    }
    if (tap_pos != stage_taps.size()) {
        throw std::invalid_argument("forward: stage taps must be increasing block indices in [1, " +
                                    std::to_string(cfg.num_blocks) + "]");
    }
    // Head-side output; stage features stay raw post-block. A 0-block model
    // has no head pathway and returns the embedded input as-is.
    res.final = cfg.num_blocks > 0 ? layer_norm(h, m.final_norm_gain, m.final_norm_bias) : h;
    return res;
}

Tensor project_to_teacher(const Tensor& y_stu, const StudentExtras& extras) {
    return matmul(y_stu, extras.projection);
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(Model& m, const std::string& path) {
    nlohmann::json j;
    j["format"] = "lindistill-checkpoint-v1";
    j["config"] = {
        {"embed_dim", m.cfg.embed_dim},       {"mlp_dim", m.cfg.mlp_dim},
        {"num_blocks", m.cfg.num_blocks},     {"patch_size", m.cfg.patch_size},
        {"image_size", m.cfg.image_size},     {"channels", m.cfg.channels},
        {"mixer", mixer_kind_name(m.cfg.mixer)}, {"use_class_token", m.cfg.use_class_token},
    };
    nlohmann::json params = nlohmann::json::object();
    for (NamedParam& p : m.parameters()) {
        nlohmann::json entry;
        entry["shape"] = p.tensor.shape();
        entry["values"] = std::vector<double>(p.tensor.data().begin(), p.tensor.data().end());
        params[p.path] = std::move(entry);
    }
    j["params"] = std::move(params);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint file: " + path);
    out << j.dump();
    out << "\n";
    if (!out) throw std::runtime_error("failed writing checkpoint file: " + path);
}

void load_checkpoint(Model& m, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint file: " + path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "lindistill-checkpoint-v1") {
        throw std::runtime_error("unrecognized checkpoint format in " + path);
    }
    const auto& params = j.at("params");
    for (NamedParam& p : m.parameters()) {
        if (!params.contains(p.path)) {
            throw std::runtime_error("checkpoint " + path + " is missing parameter '" + p.path + "'");
        }
        const auto& entry = params.at(p.path);
        const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        if (shape != p.tensor.shape()) {
            throw std::runtime_error("checkpoint parameter '" + p.path + "' has shape " +
                                     shape_str(shape) + ", model expects " +
                                     shape_str(p.tensor.shape()));
        }
        const std::vector<double> values = entry.at("values").get<std::vector<double>>();
        std::copy(values.begin(), values.end(), p.tensor.mutable_data().begin());
    }
}

} // namespace lindistill

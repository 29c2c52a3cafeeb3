#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mamlab/archive.hpp"
#include "mamlab/layers.hpp"
#include "mamlab/patching.hpp"

namespace mamlab {

struct ModelConfig {
    std::size_t embed_dim = 64;
    std::size_t encoder_layers = 4;
    std::size_t encoder_heads = 4;
    std::size_t decoder_dim = 32;
    std::size_t decoder_layers = 1;
    std::size_t decoder_heads = 4;
    std::size_t attention_window = 32;
    std::size_t attention_shift = 16;
    std::size_t head_out_dim = 32;
    std::size_t num_classes = 4;
    std::size_t mlp_hidden = 64; // classification-branch hidden width
    std::size_t mlp_ratio = 4;   // transformer MLP expansion
    std::size_t time_patches = 64;
    std::size_t freq_patches = 8;
    std::size_t patch = kPatchSize;

    PatchGrid grid() const { return {time_patches, freq_patches, patch}; }
    std::size_t patch_dim() const { return patch * patch; }

    void validate() const {
        auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
        if (embed_dim == 0 || encoder_heads == 0 || embed_dim % encoder_heads != 0) fail("embed_dim must be divisible by encoder_heads");
        if (decoder_dim == 0 || decoder_heads == 0 || decoder_dim % decoder_heads != 0) fail("decoder_dim must be divisible by decoder_heads");
        if (embed_dim % 4 != 0 || decoder_dim % 4 != 0) fail("embed_dim and decoder_dim must be divisible by 4 for the 2-D position table");
        if (decoder_layers < 1) fail("decoder_layers must be at least 1");
        if (attention_window < 1) fail("attention_window must be at least 1");
        if (head_out_dim == 0 || num_classes == 0 || mlp_hidden == 0 || mlp_ratio == 0) fail("head_out_dim, num_classes, mlp_hidden, mlp_ratio must be positive");
        if (time_patches == 0 || freq_patches == 0 || patch == 0) fail("patch grid must be non-empty");
    }

    // ViT-B encoder over the full 1024x128 grid with the default single-block decoder.
    static ModelConfig vit_base() {
        ModelConfig c;
        c.embed_dim = 768;
        c.encoder_layers = 12;
        c.encoder_heads = 12;
        c.decoder_dim = 512;
        c.decoder_heads = 16;
        c.head_out_dim = 512;
        c.num_classes = 527;
        c.mlp_hidden = 768;
        return c;
    }

    void write(KeyValues& kv, const std::string& prefix = "model.") const {
        for (const auto& [key, value] : fields()) kv.set(prefix + key, std::to_string(*value));
    }

    static ModelConfig read(const KeyValues& kv, const std::string& prefix = "model.") {
        ModelConfig c;
        for (auto& [key, value] : c.fields()) {
            if (const std::string* s = kv.find(prefix + key)) {
                try {
                    *value = static_cast<std::size_t>(std::stoull(*s));
                } catch (const std::exception&) {
                    throw ConfigError("model config: '" + key + "' is not a count: " + *s);
                }
            }
        }
        return c;
    }

    // Names and storage of every field, in serialization order.
    std::vector<std::pair<std::string, std::size_t*>> fields() {
        return {{"embed_dim", &embed_dim},           {"encoder_layers", &encoder_layers},
                {"encoder_heads", &encoder_heads},   {"decoder_dim", &decoder_dim},
                {"decoder_layers", &decoder_layers}, {"decoder_heads", &decoder_heads},
                {"attention_window", &attention_window}, {"attention_shift", &attention_shift},
                {"head_out_dim", &head_out_dim},     {"num_classes", &num_classes},
                {"mlp_hidden", &mlp_hidden},         {"mlp_ratio", &mlp_ratio},
                {"time_patches", &time_patches},     {"freq_patches", &freq_patches},
                {"patch", &patch}};
    }
    std::vector<std::pair<std::string, const std::size_t*>> fields() const {
        auto mut = const_cast<ModelConfig*>(this)->fields();
        return {mut.begin(), mut.end()};
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Encoder e(.): patch embedding + fixed 2-D position table, then global-attention blocks over the
// visible tokens only. The final norm closes the block stack, so a zero-layer encoder returns
// embedding + position exactly.
class Encoder {
public:
    Encoder(ParameterSet& params, const ModelConfig& cfg, Rng& rng)
        : patch_embed_(params, "encoder.patch_embed", cfg.patch_dim(), cfg.embed_dim, rng),
          positions_(sincos_position_table(cfg.grid(), cfg.embed_dim)),
          total_(cfg.grid().size()) {
        for (std::size_t i = 0; i < cfg.encoder_layers; ++i) {
            blocks_.emplace_back(params, "encoder.blocks." + std::to_string(i), cfg.embed_dim, cfg.encoder_heads,
                                 cfg.mlp_ratio, rng);
        }
        if (!blocks_.empty()) norm_ = LayerNorm(params, "encoder.norm", cfg.embed_dim);
    }

    // Rows of `patches` belong to grid positions `indices` (any order); output rows follow the same order.
    Tensor encode(const Tensor& patches, const std::vector<std::size_t>& indices) const {
        if (patches.rank() != 2 || patches.dim(0) == 0) throw ContractError("encode: needs at least one visible patch");
        if (indices.size() != patches.dim(0)) {
            throw ContractError("encode: " + std::to_string(patches.dim(0)) + " patch rows but " +
                                std::to_string(indices.size()) + " positions");
        }
        for (std::size_t i : indices) {
            if (i >= total_) throw ContractError("encode: position " + std::to_string(i) + " outside the grid");
        }
        Tensor x = add(patch_embed_(patches), gather_rows(positions_, indices));
        for (const auto& block : blocks_) x = block(x);
        return blocks_.empty() ? x : norm_(x);
    }

    const Tensor& positions() const { return positions_; }
    std::size_t layers() const { return blocks_.size(); }

private:
    Linear patch_embed_;
    Tensor positions_;
    std::size_t total_;
    std::vector<TransformerBlock> blocks_;
    LayerNorm norm_;
};

// Decoder g(.): projects visible latents, fills masked positions with the shared mask token,
// adds its own position table, then runs shifted-local-attention blocks over all N positions.
// Even-numbered blocks use the configured window offset and odd-numbered blocks use none, so
// consecutive blocks alternate between shifted and unshifted windows.
class Decoder {
public:
    Decoder(ParameterSet& params, const ModelConfig& cfg, Rng& rng)
        : embed_(params, "decoder.embed", cfg.embed_dim, cfg.decoder_dim, rng),
          mask_token_(params.add("decoder.mask_token", normal_tensor({1, cfg.decoder_dim}, 0.02, rng), false)),
          positions_(sincos_position_table(cfg.grid(), cfg.decoder_dim)),
          window_(cfg.attention_window),
          shift_(cfg.attention_shift) {
        for (std::size_t i = 0; i < cfg.decoder_layers; ++i) {
            blocks_.emplace_back(params, "decoder.blocks." + std::to_string(i), cfg.decoder_dim, cfg.decoder_heads,
                                 cfg.mlp_ratio, rng);
        }
        norm_ = LayerNorm(params, "decoder.norm", cfg.decoder_dim);
    }

    std::size_t block_shift(std::size_t block) const { return block % 2 == 0 ? shift_ : 0; }

    // Activations entering the first block (N x decoder_dim).
    Tensor input(const Tensor& z_visible, const MaskPlan& plan) const {
        if (z_visible.rank() != 2 || z_visible.dim(0) != plan.visible.size()) {
            throw ContractError("decode: " + std::to_string(z_visible.rank() == 2 ? z_visible.dim(0) : 0) +
                                " visible latents for a plan with " + std::to_string(plan.visible.size()) + " visible positions");
        }
        if (plan.total != positions_.dim(0)) {
            throw ContractError("decode: plan covers " + std::to_string(plan.total) + " positions, grid has " +
                                std::to_string(positions_.dim(0)));
        }
        const Tensor projected = embed_(z_visible);
        const Tensor tokens = gather_rows(mask_token_, std::vector<std::size_t>(plan.masked.size(), 0));
        return add(scatter_back(projected, tokens, plan), positions_);
    }

    Tensor decode(const Tensor& z_visible, const MaskPlan& plan) const {
        Tensor x = input(z_visible, plan);
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            x = blocks_[b](x, local_attention_mask(x.dim(0), window_, block_shift(b)));
        }
        return norm_(x);
    }

    const Tensor& mask_token() const { return mask_token_; }
    const Tensor& positions() const { return positions_; }

private:
    Linear embed_;
    Tensor mask_token_;
    Tensor positions_;
    std::size_t window_;
    std::size_t shift_;
    std::vector<TransformerBlock> blocks_;
    LayerNorm norm_;
};

// h(.): fully connected layer followed by layer normalization.
struct ProjectionHead {
    Linear fc;
    LayerNorm norm;

    ProjectionHead(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng)
        : fc(params, name + ".fc", in, out, rng), norm(params, name + ".norm", out) {}

    Tensor operator()(const Tensor& z) const {
        if (z.rank() != 2 || z.dim(1) != fc.in_dim()) {
            throw ContractError("project_head: input " + shape_str(z.shape()) + " needs trailing width " +
                                std::to_string(fc.in_dim()));
        }
        return norm(fc(z));
    }
};

// Classification branch: mean-pool visible latents, then linear -> batch norm -> ReLU -> linear.
class ClassificationHead {
public:
    ClassificationHead(ParameterSet& params, const ModelConfig& cfg, Rng& rng)
        : fc1_(params, "cls_head.fc1", cfg.embed_dim, cfg.mlp_hidden, rng),
          bn_gain_(params.add("cls_head.bn.gain", Tensor::filled({cfg.mlp_hidden}, 1.0), false)),
          bn_bias_(params.add("cls_head.bn.bias", Tensor::zeros({cfg.mlp_hidden}), false)),
          fc2_(params, "cls_head.fc2", cfg.mlp_hidden, cfg.num_classes, rng),
          stats_(cfg.mlp_hidden) {}

    static Tensor pool(const Tensor& z_visible) {
        if (z_visible.rank() != 2 || z_visible.dim(0) == 0) throw ContractError("classify: empty visible set");
        return mean_rows(z_visible);
    }

    // One row of logits per clip. Training mode normalizes with batch statistics.
    Tensor logits(const std::vector<Tensor>& z_visible_per_clip, bool training) {
        std::vector<Tensor> pooled;
        pooled.reserve(z_visible_per_clip.size());
        for (const Tensor& z : z_visible_per_clip) pooled.push_back(pool(z));
        Tensor g = concat_rows(pooled);
        Tensor h = batch_norm(fc1_(g), bn_gain_, bn_bias_, stats_, training, 1e-5, 0.1);
        return fc2_(relu(h));
    }

    BatchNormStats& stats() { return stats_; }
    const BatchNormStats& stats() const { return stats_; }

private:
    Linear fc1_;
    Tensor bn_gain_, bn_bias_;
    Linear fc2_;
    BatchNormStats stats_;
};

// Fine-tuning task head over the mean-pooled encoder output: layer norm then linear.
struct TaskHead {
    LayerNorm norm;
    Linear fc;

    TaskHead(ParameterSet& params, const ModelConfig& cfg, Rng& rng)
        : norm(params, "task_head.norm", cfg.embed_dim), fc(params, "task_head.fc", cfg.embed_dim, cfg.num_classes, rng) {}

    Tensor operator()(const Tensor& pooled) const { return fc(norm(pooled)); }
};

// Student network: encoder, decoder, the two pretraining heads (teacher-feature projection and
// patch reconstruction), the classification branch, and the fine-tuning task head.
class MaskedAudioModel {
public:
    MaskedAudioModel(const ModelConfig& cfg, std::uint64_t seed)
        : cfg_((cfg.validate(), cfg)),
          rng_(seed),
          encoder_(params_, cfg_, rng_),
          decoder_(params_, cfg_, rng_),
          target_head_(params_, "target_head", cfg_.decoder_dim, cfg_.head_out_dim, rng_),
          recon_head_(params_, "recon_head", cfg_.decoder_dim, cfg_.patch_dim(), rng_),
          cls_head_(params_, cfg_, rng_),
          task_head_(params_, cfg_, rng_) {}

    MaskedAudioModel(const MaskedAudioModel&) = delete;
    MaskedAudioModel& operator=(const MaskedAudioModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }
    const Encoder& encoder() const { return encoder_; }
    const Decoder& decoder() const { return decoder_; }
    ClassificationHead& cls_head() { return cls_head_; }

    Tensor encode(const Tensor& visible_patches, const std::vector<std::size_t>& indices) const {
        return encoder_.encode(visible_patches, indices);
    }
    Tensor decode(const Tensor& z_visible, const MaskPlan& plan) const { return decoder_.decode(z_visible, plan); }
    Tensor project_head(const Tensor& z) const { return target_head_(z); }
    Tensor reconstruct(const Tensor& z) const { return recon_head_(z); }

    Tensor classify(const std::vector<Tensor>& z_visible_per_clip, bool training) {
        return cls_head_.logits(z_visible_per_clip, training);
    }

    // Eval-mode logits for one clip.
    Tensor classify(const Tensor& z_visible) { return cls_head_.logits({z_visible}, false); }

    // Fine-tuning / inference path: every patch goes through the encoder (masked patches zeroed
    // when a plan is given), mean pooled, then the task head. The decoder is unused.
    Tensor forward_finetune(const PatchSequence& seq, const MaskPlan* plan = nullptr) const {
        const PatchSequence input = plan ? zero_masked(seq, *plan) : seq;
        std::vector<std::size_t> all(input.features.dim(0));
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return task_head_(mean_rows(encoder_.encode(input.features, all)));
    }

    // Parameters that receive gradients for a pretraining objective.
    std::vector<NamedParameter*> pretrain_parameters(bool uses_target, bool uses_recon, bool uses_cls, bool has_masked) {
        std::vector<NamedParameter*> out;
        const bool decoder_used = uses_target || uses_recon;
        for (auto& p : params_.items()) {
            const std::string& n = p.name;
            auto starts = [&](const char* prefix) { return n.rfind(prefix, 0) == 0; };
            if (starts("encoder.")) out.push_back(&p);
            else if (starts("decoder.mask_token")) {
                if (decoder_used && has_masked) out.push_back(&p);
            } else if (starts("decoder.")) {
                if (decoder_used) out.push_back(&p);
            } else if (starts("target_head.")) {
                if (uses_target) out.push_back(&p);
            } else if (starts("recon_head.")) {
                if (uses_recon) out.push_back(&p);
            } else if (starts("cls_head.")) {
                if (uses_cls) out.push_back(&p);
            }
        }
        return out;
    }

    std::vector<NamedParameter*> finetune_parameters() {
        std::vector<NamedParameter*> out;
        for (auto& p : params_.items()) {
            if (p.name.rfind("encoder.", 0) == 0 || p.name.rfind("task_head.", 0) == 0) out.push_back(&p);
        }
        return out;
    }

private:
    ModelConfig cfg_;
    Rng rng_;
    ParameterSet params_;
    Encoder encoder_;
    Decoder decoder_;
    ProjectionHead target_head_;
    ProjectionHead recon_head_;
    ClassificationHead cls_head_;
    TaskHead task_head_;
};

inline constexpr const char* kRunningMeanBlock = "cls_head.bn.running_mean";
inline constexpr const char* kRunningVarBlock = "cls_head.bn.running_var";

// Checkpoint payload: the config under "model.*" in the header, then one block per parameter in
// registration order, then the classifier's batch-norm running statistics.
inline Archive model_to_archive(MaskedAudioModel& model) {
    Archive a;
    a.header.set("kind", "model");
    model.config().write(a.header);
    for (const auto& p : model.params().items()) a.blocks.push_back({p.name, p.tensor.shape(), p.tensor.values()});
    const auto& stats = model.cls_head().stats();
    a.blocks.push_back({kRunningMeanBlock, {stats.mean.size()}, stats.mean});
    a.blocks.push_back({kRunningVarBlock, {stats.var.size()}, stats.var});
    return a;
}

// Overwrites parameter values from an archive written for the same config.
inline void load_model_state(MaskedAudioModel& model, const Archive& a) {
    const ModelConfig stored = ModelConfig::read(a.header);
    if (!(stored == model.config())) throw FormatError("checkpoint: stored model config differs from the model being loaded");
    auto block = [&](const std::string& name, const Shape& shape) -> const ArchiveBlock& {
        const ArchiveBlock* b = a.find(name);
        if (!b) throw FormatError("checkpoint: missing block '" + name + "'");
        if (b->shape != shape) {
            throw FormatError("checkpoint: block '" + name + "' has shape " + shape_str(b->shape) + ", expected " +
                              shape_str(shape));
        }
        return *b;
    };
    for (auto& p : model.params().items()) {
        const ArchiveBlock& b = block(p.name, p.tensor.shape());
        std::copy(b.values.begin(), b.values.end(), p.tensor.mutable_data().begin());
    }
    auto& stats = model.cls_head().stats();
    stats.mean = block(kRunningMeanBlock, {stats.mean.size()}).values;
    stats.var = block(kRunningVarBlock, {stats.var.size()}).values;
}

inline std::unique_ptr<MaskedAudioModel> model_from_archive(const Archive& a) {
    auto model = std::make_unique<MaskedAudioModel>(ModelConfig::read(a.header), 0);
    load_model_state(*model, a);
    return model;
}

} // namespace mamlab

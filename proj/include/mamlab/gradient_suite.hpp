#pragma once

#include <string>
#include <vector>

#include "mamlab/gradcheck.hpp"
#include "mamlab/model.hpp"
#include "mamlab/objectives.hpp"
#include "mamlab/ops.hpp"
#include "mamlab/patching.hpp"

// Finite-difference checks over every differentiable primitive, each loss, and the composed
// pretraining objectives of a tiny model. Shared by the gradcheck command and the tests.

namespace mamlab {

struct GradientCheck {
    std::string name;
    double error = 0.0;
    double tolerance = 0.0;

    bool passed() const { return error < tolerance; }
};

// Tiny model used by the end-to-end checks (4x8 patch grid).
inline ModelConfig gradient_check_config() {
    ModelConfig c;
    c.embed_dim = 8;
    c.encoder_layers = 1;
    c.encoder_heads = 2;
    c.decoder_dim = 8;
    c.decoder_layers = 1;
    c.decoder_heads = 2;
    c.attention_window = 8;
    c.attention_shift = 4;
    c.head_out_dim = 4;
    c.num_classes = 3;
    c.mlp_hidden = 8;
    c.mlp_ratio = 2;
    c.time_patches = 4;
    c.freq_patches = 8;
    return c;
}

namespace detail {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double sd = 1.0, double offset = 0.0) {
    Rng rng(seed);
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> v(n);
    for (double& x : v) x = offset + rng.normal(0.0, sd);
    return Tensor::from(std::move(shape), std::move(v));
}

// Values bounded away from zero, for kinks such as relu.
inline Tensor off_zero_tensor(Shape shape, std::uint64_t seed) {
    Tensor t = random_tensor(std::move(shape), seed);
    for (double& x : t.mutable_data()) x += x < 0.0 ? -0.1 : 0.1;
    return t;
}

inline std::vector<Tensor> as_tensors(const std::vector<NamedParameter*>& params) {
    std::vector<Tensor> out;
    for (NamedParameter* p : params) out.push_back(p->tensor);
    return out;
}

} // namespace detail

inline std::vector<GradientCheck> run_primitive_gradient_checks(double tolerance = 1e-4, double epsilon = 1e-6) {
    using detail::random_tensor;
    std::vector<GradientCheck> out;
    auto unary = [&](const std::string& name, const Tensor& point, auto op) {
        const Tensor w = random_tensor(op(point).shape(), 991);
        out.push_back({name, check_gradient([&](const Tensor& x) { return sum(mul(op(x), w)); }, point, epsilon), tolerance});
    };
    auto multi = [&](const std::string& name, std::vector<Tensor> inputs, auto fn) {
        for (Tensor& t : inputs) t = Tensor::from(t.shape(), t.values(), true);
        out.push_back({name, check_gradient([&] { return fn(inputs); }, inputs, epsilon), tolerance});
    };
    const Tensor a = random_tensor({3, 4}, 1), b = random_tensor({3, 4}, 2), c = random_tensor({4, 5}, 3);

    multi("matmul", {a, c}, [](const std::vector<Tensor>& t) { return sum(mul(matmul(t[0], t[1]), random_tensor({3, 5}, 4))); });
    multi("add", {a, b}, [](const std::vector<Tensor>& t) { return sum(mul(add(t[0], t[1]), random_tensor({3, 4}, 5))); });
    multi("sub", {a, b}, [](const std::vector<Tensor>& t) { return sum(mul(sub(t[0], t[1]), random_tensor({3, 4}, 6))); });
    multi("mul", {a, b}, [](const std::vector<Tensor>& t) { return sum(mul(mul(t[0], t[1]), random_tensor({3, 4}, 7))); });
    multi("add_row", {a, random_tensor({4}, 8)},
          [](const std::vector<Tensor>& t) { return sum(mul(add_row(t[0], t[1]), random_tensor({3, 4}, 9))); });
    multi("concat_rows", {a, random_tensor({2, 4}, 10)},
          [](const std::vector<Tensor>& t) { return sum(mul(concat_rows({t[0], t[1]}), random_tensor({5, 4}, 11))); });
    unary("scale", a, [](const Tensor& x) { return scale(x, -2.5); });
    unary("square", a, [](const Tensor& x) { return square(x); });
    unary("transpose", a, [](const Tensor& x) { return transpose(x); });
    unary("reshape", a, [](const Tensor& x) { return reshape(x, {2, 6}); });
    unary("gather_rows", a, [](const Tensor& x) { return gather_rows(x, {2, 0, 2}); });
    unary("sum", a, [](const Tensor& x) { return sum(x); });
    unary("mean", a, [](const Tensor& x) { return mean(x); });
    unary("mean_rows", a, [](const Tensor& x) { return mean_rows(x); });
    unary("relu", detail::off_zero_tensor({3, 4}, 12), [](const Tensor& x) { return relu(x); });
    unary("gelu", a, [](const Tensor& x) { return gelu(x); });
    unary("softplus", a, [](const Tensor& x) { return softplus(x); });
    unary("softmax_rows", a, [](const Tensor& x) { return softmax_rows(x); });
    unary("log_softmax_rows", a, [](const Tensor& x) { return log_softmax_rows(x); });
    multi("layer_norm", {a, random_tensor({4}, 13, 0.3, 1.0), random_tensor({4}, 14)}, [](const std::vector<Tensor>& t) {
        return sum(mul(layer_norm(t[0], t[1], t[2]), random_tensor({3, 4}, 15)));
    });
    multi("batch_norm", {random_tensor({5, 3}, 16), random_tensor({3}, 17, 0.3, 1.0), random_tensor({3}, 18)},
          [](const std::vector<Tensor>& t) {
              BatchNormStats stats(3);
              return sum(mul(batch_norm(t[0], t[1], t[2], stats, true), random_tensor({5, 3}, 19)));
          });
    const Tensor q = random_tensor({6, 4}, 20), k = random_tensor({6, 4}, 21), v = random_tensor({6, 4}, 22);
    multi("attention", {q, k, v}, [](const std::vector<Tensor>& t) {
        return sum(mul(attention(t[0], t[1], t[2], 2), random_tensor({6, 4}, 23)));
    });
    multi("attention_local_mask", {q, k, v}, [](const std::vector<Tensor>& t) {
        return sum(mul(attention(t[0], t[1], t[2], 2, local_attention_mask(6, 2, 1)), random_tensor({6, 4}, 24)));
    });
    return out;
}

inline std::vector<GradientCheck> run_loss_gradient_checks(double tolerance = 1e-4, double epsilon = 1e-6) {
    using detail::random_tensor;
    std::vector<GradientCheck> out;
    const Tensor tv = random_tensor({3, 4}, 31), tm = random_tensor({2, 4}, 32);
    std::vector<Tensor> y = {Tensor::from({3, 4}, random_tensor({3, 4}, 33).values(), true),
                             Tensor::from({2, 4}, random_tensor({2, 4}, 34).values(), true)};
    out.push_back({"target_loss", check_gradient([&] { return target_loss(y[0], tv, y[1], tm); }, y, epsilon), tolerance});

    const Tensor logits = random_tensor({4, 3}, 35, 3.0);
    for (double tau : {1.0, 10.0}) {
        out.push_back({"classification_loss tau=" + std::to_string(static_cast<int>(tau)),
                       check_gradient([&](const Tensor& z) { return classification_loss(z, tau, {0, 2, 1, 2}); }, logits, epsilon),
                       tolerance});
    }
    const Tensor multi = Tensor::matrix(4, 3, {1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1, 0});
    out.push_back({"multilabel_classification_loss",
                   check_gradient([&](const Tensor& z) { return multilabel_classification_loss(z, 10.0, multi); }, logits, epsilon),
                   tolerance});
    const Tensor patches = random_tensor({3, 16}, 36);
    out.push_back({"reconstruction_loss",
                   check_gradient([&](const Tensor& p) { return reconstruction_loss(p, patches); }, random_tensor({3, 16}, 37), epsilon),
                   tolerance});
    return out;
}

// Full objective of `mode` (all components at the mode's weights) over two clips of the tiny
// model, differentiated with respect to every parameter the mode trains.
inline GradientCheck run_objective_gradient_check(Mode mode, double tolerance = 1e-3, double epsilon = 1e-6) {
    const ModelConfig cfg = gradient_check_config();
    MaskedAudioModel model(cfg, 71);
    LossWeights w;
    w.mode = mode;
    w.lambda_cls = mode == Mode::SupMAM ? 0.01 : 1e-4;
    const double gamma = uses_target(mode) ? 0.2 : 0.4;
    const std::size_t n = cfg.grid().size();
    std::vector<PatchSequence> clips;
    std::vector<MaskPlan> plans;
    std::vector<Tensor> targets;
    for (std::uint64_t i = 0; i < 2; ++i) {
        clips.push_back({cfg.grid(), detail::random_tensor({n, cfg.patch_dim()}, 80 + i), {}});
        plans.push_back(sample_unstructured_mask(n, gamma, 90 + i));
        targets.push_back(detail::random_tensor({n, cfg.head_out_dim}, 100 + i, 0.5));
    }
    const std::vector<std::size_t> labels = {2, 0};
    auto loss = [&] {
        std::vector<Tensor> latents, target_terms, recon_terms;
        for (std::size_t b = 0; b < clips.size(); ++b) {
            const Partitioned parts = partition(clips[b], plans[b]);
            const Tensor z = model.encode(parts.visible, plans[b].visible);
            latents.push_back(z);
            const Tensor decoded = model.decode(z, plans[b]);
            if (uses_target(mode)) {
                const Tensor y = model.project_head(decoded);
                const Partitioned t = split_targets(targets[b], plans[b]);
                target_terms.push_back(target_loss(gather_rows(y, plans[b].visible), t.visible, gather_rows(y, plans[b].masked), t.masked));
            } else {
                recon_terms.push_back(reconstruction_loss(model.reconstruct(gather_rows(decoded, plans[b].masked)), parts.masked));
            }
        }
        LossComponents c;
        if (uses_target(mode)) c.target = scale(add(target_terms[0], target_terms[1]), 0.5);
        if (uses_recon(mode)) c.recon = scale(add(recon_terms[0], recon_terms[1]), 0.5);
        if (uses_cls(mode)) c.cls = classification_loss(model.classify(latents, true), w.tau, labels);
        return total_loss(c, w).total;
    };
    const auto params = detail::as_tensors(model.pretrain_parameters(uses_target(mode), uses_recon(mode), uses_cls(mode), true));
    return {std::string("objective ") + mode_name(mode), check_gradient(loss, params, epsilon), tolerance};
}

inline std::vector<GradientCheck> run_gradient_suite() {
    std::vector<GradientCheck> out = run_primitive_gradient_checks();
    for (auto& c : run_loss_gradient_checks()) out.push_back(std::move(c));
    for (Mode m : {Mode::MAM, Mode::MAM_CLAP, Mode::SupMAM, Mode::SupMAM_CLAP}) out.push_back(run_objective_gradient_check(m));
    return out;
}

} // namespace mamlab

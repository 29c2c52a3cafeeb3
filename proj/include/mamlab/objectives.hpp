#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mamlab/ops.hpp"

namespace mamlab {

enum class Mode { MAM, MAM_CLAP, SupMAM, SupMAM_CLAP };

inline const char* mode_name(Mode m) {
    switch (m) {
    case Mode::MAM: return "MAM";
    case Mode::MAM_CLAP: return "MAM-CLAP";
    case Mode::SupMAM: return "SupMAM";
    case Mode::SupMAM_CLAP: return "SupMAM-CLAP";
    }
    return "?";
}

// Accepts the display names, case-insensitively, with '-' or '_'.
inline Mode parse_mode(const std::string& text) {
    std::string key;
    for (char c : text) key += c == '_' ? '-' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    for (Mode m : {Mode::MAM, Mode::MAM_CLAP, Mode::SupMAM, Mode::SupMAM_CLAP}) {
        std::string name = mode_name(m);
        std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
        if (key == name) return m;
    }
    throw ConfigError("unknown mode '" + text + "' (expected MAM, MAM-CLAP, SupMAM or SupMAM-CLAP)");
}

inline bool uses_target(Mode m) { return m == Mode::MAM_CLAP || m == Mode::SupMAM_CLAP; }
inline bool uses_recon(Mode m) { return m == Mode::MAM || m == Mode::SupMAM; }
inline bool uses_cls(Mode m) { return m == Mode::SupMAM || m == Mode::SupMAM_CLAP; }

struct LossWeights {
    double lambda_cls = 0.0;
    double tau = 10.0;
    Mode mode = Mode::MAM_CLAP;
    // Ablations: drop the mode's target/reconstruction term, or its classification term.
    bool drop_base = false;
    bool drop_cls = false;

    bool has_base() const { return !drop_base; }
    bool has_cls() const { return uses_cls(mode) && !drop_cls; }
    // The classification term carries lambda only when it is combined with another term.
    double cls_weight() const { return has_base() ? lambda_cls : 1.0; }

    void validate() const {
        if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be positive, got " + std::to_string(tau));
        if (!(lambda_cls >= 0.0) || !std::isfinite(lambda_cls)) {
            throw ConfigError("lambda_cls must be non-negative, got " + std::to_string(lambda_cls));
        }
        if (!has_base() && !has_cls()) throw ConfigError(std::string("mode ") + mode_name(mode) + " has no loss term left");
    }
};

struct LossBreakdown {
    double target_term = 0.0;
    double cls_term = 0.0;
    double recon_term = 0.0;
    double total = 0.0;
};

// (1/l_v) sum_rows |Y_v - T_v|^2 + (1/l_m) sum_rows |Y_m - T_m|^2; the masked term is dropped when l_m = 0.
inline Tensor target_loss(const Tensor& y_visible, const Tensor& t_visible, const Tensor& y_masked, const Tensor& t_masked) {
    auto region = [](const Tensor& y, const Tensor& t, const char* name) {
        if (y.rank() != 2 || y.shape() != t.shape()) {
            throw ContractError(std::string("target_loss: ") + name + " predictions " + shape_str(y.shape()) +
                                " vs targets " + shape_str(t.shape()));
        }
        return scale(sum(square(sub(y, t))), 1.0 / static_cast<double>(y.dim(0)));
    };
    if (y_visible.rank() != 2 || y_visible.dim(0) == 0) throw ContractError("target_loss: needs at least one visible row");
    Tensor loss = region(y_visible, t_visible, "visible");
    if (y_masked.numel() == 0 && t_masked.numel() == 0) return loss;
    return add(loss, region(y_masked, t_masked, "masked"));
}

// Softmax cross-entropy of logits / tau, averaged over rows. `labels` holds one class per row.
inline Tensor classification_loss(const Tensor& logits, double tau, const std::vector<std::size_t>& labels) {
    if (!(tau > 0.0)) throw ParameterError("classification_loss: tau must be positive");
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ContractError("classification_loss: " + std::to_string(labels.size()) + " labels for logits " +
                            shape_str(logits.shape()));
    }
    const std::size_t b = logits.dim(0), k = logits.dim(1);
    std::vector<double> onehot(b * k, 0.0);
    for (std::size_t r = 0; r < b; ++r) {
        if (labels[r] >= k) {
            throw InputError("classification_loss: label " + std::to_string(labels[r]) + " outside [0, " + std::to_string(k) + ")");
        }
        onehot[r * k + labels[r]] = 1.0;
    }
    const Tensor logp = log_softmax_rows(scale(logits, 1.0 / tau));
    return scale(sum(mul(logp, Tensor::matrix(b, k, std::move(onehot)))), -1.0 / static_cast<double>(b));
}

// Multi-label: mean binary cross-entropy of sigmoid(logits / tau) against a 0/1 target matrix.
inline Tensor multilabel_classification_loss(const Tensor& logits, double tau, const Tensor& multi_labels) {
    if (!(tau > 0.0)) throw ParameterError("classification_loss: tau must be positive");
    if (logits.rank() != 2 || multi_labels.shape() != logits.shape()) {
        throw ContractError("classification_loss: label matrix " + shape_str(multi_labels.shape()) + " vs logits " +
                            shape_str(logits.shape()));
    }
    for (double y : multi_labels.values()) {
        if (y != 0.0 && y != 1.0) throw InputError("classification_loss: multi-label targets must be 0 or 1");
    }
    // -[y log s(z) + (1 - y) log(1 - s(z))] = softplus(z) - y z
    const Tensor z = scale(logits, 1.0 / tau);
    return mean(sub(softplus(z), mul(multi_labels.detach(), z)));
}

inline constexpr double kReconVarianceFloor = 1e-6;

// Each target patch standardized to zero mean and unit variance, (x - mu) / sqrt(var + 1e-6).
inline Tensor normalize_patches(const Tensor& patches) {
    const std::size_t n = patches.dim(0), d = patches.dim(1);
    std::vector<double> v = patches.values();
    for (std::size_t r = 0; r < n; ++r) {
        double mu = 0.0, var = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += v[r * d + c];
        mu /= static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) var += (v[r * d + c] - mu) * (v[r * d + c] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kReconVarianceFloor);
        for (std::size_t c = 0; c < d; ++c) v[r * d + c] = (v[r * d + c] - mu) * inv;
    }
    return Tensor::matrix(n, d, std::move(v));
}

// Mean squared error over all masked-patch elements against per-patch normalized targets.
inline Tensor reconstruction_loss(const Tensor& pred_masked, const Tensor& patches_masked) {
    if (pred_masked.rank() != 2 || pred_masked.shape() != patches_masked.shape()) {
        throw ContractError("reconstruction_loss: predictions " + shape_str(pred_masked.shape()) + " vs patches " +
                            shape_str(patches_masked.shape()));
    }
    if (pred_masked.dim(0) == 0) throw ContractError("reconstruction_loss: no masked patches (mask ratio must be > 0)");
    return mean(square(sub(pred_masked, normalize_patches(patches_masked))));
}

struct LossComponents {
    std::optional<Tensor> target;
    std::optional<Tensor> cls;
    std::optional<Tensor> recon;
};

struct WeightedLoss {
    Tensor total;
    LossBreakdown breakdown;
};

// MAM -> recon; MAM-CLAP -> target; SupMAM -> recon + lambda cls; SupMAM-CLAP -> target + lambda cls.
inline WeightedLoss total_loss(const LossComponents& parts, const LossWeights& w) {
    w.validate();
    auto need = [&](const std::optional<Tensor>& t, const char* what) -> const Tensor& {
        if (!t) throw ConfigError(std::string("mode ") + mode_name(w.mode) + " needs the " + what + " loss");
        if (!t->is_scalar()) throw ContractError(std::string(what) + " loss must be a scalar");
        return *t;
    };
    WeightedLoss out;
    if (w.has_base()) {
        const Tensor& base = uses_target(w.mode) ? need(parts.target, "target") : need(parts.recon, "reconstruction");
        (uses_target(w.mode) ? out.breakdown.target_term : out.breakdown.recon_term) = base.item();
        out.total = base;
    }
    if (w.has_cls()) {
        const Tensor& cls = need(parts.cls, "classification");
        out.breakdown.cls_term = cls.item();
        const Tensor weighted = scale(cls, w.cls_weight());
        out.total = w.has_base() ? add(out.total, weighted) : weighted;
    }
    out.breakdown.total = out.total.item();
    return out;
}

// Recomputes the weighted sum from breakdown fields.
inline double recombine(const LossBreakdown& b, const LossWeights& w) {
    double total = 0.0;
    if (w.has_base()) total = uses_target(w.mode) ? b.target_term : b.recon_term;
    if (w.has_cls()) total = w.has_base() ? total + w.cls_weight() * b.cls_term : w.cls_weight() * b.cls_term;
    return total;
}

} // namespace mamlab

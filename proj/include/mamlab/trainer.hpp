#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>

#include "mamlab/config.hpp"
#include "mamlab/metrics.hpp"
#include "mamlab/model.hpp"
#include "mamlab/objectives.hpp"
#include "mamlab/optim.hpp"
#include "mamlab/synth.hpp"
#include "mamlab/teacher.hpp"

namespace mamlab {

// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(error_mutex);
                        if (!error) error = std::current_exception();
                        next = n;
                    }
                }
            });
        }
    }
    if (error) std::rethrow_exception(error);
}

struct FeatureNorm {
    double mean = 0.0;
    double std = 1.0;
};

struct Clip {
    std::filesystem::path path;
    std::vector<std::size_t> labels;
    PatchSequence patches; // normalized log-mel patches
};

// Loaded dataset: every 5th clip (index 4, 9, ...) is held out for evaluation.
struct Corpus {
    std::vector<Clip> clips;
    std::vector<std::size_t> train;
    std::vector<std::size_t> eval;
    FeatureNorm norm;
    std::size_t num_classes = 0;
    bool multi_label = false;
    PatchGrid grid;
};

inline bool is_eval_index(std::size_t i) { return i % 5 == 4; }

// Reads the manifest, extracts padded log-mel features and normalizes with the global mean and
// standard deviation of the training split (or with `norm` when given, e.g. from a checkpoint).
inline Corpus load_corpus(const std::filesystem::path& manifest, std::size_t target_frames,
                          std::optional<FeatureNorm> norm = std::nullopt, std::size_t threads = worker_threads()) {
    const auto entries = read_manifest(manifest);
    if (entries.empty()) throw InputError("dataset " + manifest.string() + " is empty");
    std::vector<MelSpectrogram> specs(entries.size());
    parallel_for(entries.size(), threads, [&](std::size_t i) { specs[i] = load_features(entries[i].path, target_frames); });

    Corpus c;
    for (std::size_t i = 0; i < entries.size(); ++i) (is_eval_index(i) ? c.eval : c.train).push_back(i);
    if (norm) {
        c.norm = *norm;
    } else {
        const auto& stat_set = c.train.empty() ? c.eval : c.train;
        double sum = 0.0, count = 0.0;
        for (std::size_t i : stat_set) {
            for (double x : specs[i].values) sum += x;
            count += static_cast<double>(specs[i].values.size());
        }
        const double mean = sum / count;
        double ss = 0.0;
        for (std::size_t i : stat_set) {
            for (double x : specs[i].values) ss += (x - mean) * (x - mean);
        }
        c.norm = {mean, std::sqrt(ss / count)};
        if (!(c.norm.std > 0.0)) c.norm.std = 1.0;
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        for (double& x : specs[i].values) x = (x - c.norm.mean) / c.norm.std;
        Clip clip{entries[i].path, entries[i].labels, patchify(specs[i])};
        if (clip.labels.empty()) throw InputError(entries[i].path.string() + ": clip has no label");
        c.multi_label = c.multi_label || clip.labels.size() > 1;
        for (std::size_t l : clip.labels) c.num_classes = std::max(c.num_classes, l + 1);
        c.grid = clip.patches.grid;
        c.clips.push_back(std::move(clip));
    }
    return c;
}

struct MetricsRow {
    std::size_t step = 0;
    std::string mode;
    LossBreakdown loss;
    std::optional<double> acc;
    std::optional<double> map;
    double realized_gamma = 0.0;
    double seconds = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,mode,target_term,cls_term,recon_term,total,acc,map,realized_gamma,seconds";

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    auto opt = [](const std::optional<double>& v) { return v ? exact_double(*v) : std::string(); };
    f << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        f << r.step << ',' << r.mode << ',' << exact_double(r.loss.target_term) << ',' << exact_double(r.loss.cls_term) << ','
          << exact_double(r.loss.recon_term) << ',' << exact_double(r.loss.total) << ',' << opt(r.acc) << ',' << opt(r.map) << ','
          << exact_double(r.realized_gamma) << ',' << exact_double(r.seconds) << '\n';
    }
    if (!f) throw IoError("write failed for " + path.string());
}

struct EvalResult {
    std::optional<double> accuracy; // single-label data only
    double map = 0.0;
    ScoreTable scores;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;  // one per optimization step
    std::vector<MetricsRow> probe; // fixed-batch losses (pretraining) or evaluations (fine-tuning)
    LossBreakdown initial;
    LossBreakdown final;
    std::optional<EvalResult> eval;
    std::optional<double> train_accuracy;
    std::filesystem::path checkpoint;
};

namespace detail {

inline constexpr std::uint64_t kInitTag = 0x1417;
inline constexpr std::uint64_t kBatchTag = 0xba7c;
inline constexpr std::uint64_t kMaskTag = 0x3a5c;
inline constexpr std::uint64_t kProbeTag = 0x960b;
inline constexpr std::uint64_t kFinetuneTag = 0xf1e7;

inline Tensor label_matrix(const Corpus& c, const std::vector<std::size_t>& idx, std::size_t classes) {
    std::vector<double> y(idx.size() * classes, 0.0);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t l : c.clips[idx[r]].labels) {
            if (l >= classes) throw InputError("label " + std::to_string(l) + " outside the model's " + std::to_string(classes) + " classes");
            y[r * classes + l] = 1.0;
        }
    }
    return Tensor::matrix(idx.size(), classes, std::move(y));
}

inline Tensor supervised_loss(const Corpus& c, const std::vector<std::size_t>& idx, const Tensor& logits, double tau) {
    if (c.multi_label) return multilabel_classification_loss(logits, tau, label_matrix(c, idx, logits.dim(1)));
    std::vector<std::size_t> y;
    for (std::size_t i : idx) y.push_back(c.clips[i].labels.front());
    return classification_loss(logits, tau, y);
}

inline Tensor sum_all(const std::vector<Tensor>& xs) {
    Tensor acc = xs.front();
    for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
}

inline std::vector<std::size_t> sample_batch(const std::vector<std::size_t>& pool, std::size_t batch, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> out;
    for (std::size_t k : rng.sample_without_replacement(pool.size(), std::min(batch, pool.size()))) out.push_back(pool[k]);
    return out;
}

inline void check_finite(const LossBreakdown& b, std::size_t step) {
    for (double v : {b.target_term, b.cls_term, b.recon_term, b.total}) {
        if (!std::isfinite(v)) throw NumericError("non-finite loss at step " + std::to_string(step));
    }
}

} // namespace detail

// Mode loss for one batch. Clip b uses the unstructured plan seeded by derive_seed(mask_seed, b).
struct BatchLoss {
    WeightedLoss loss;
    double realized_gamma = 0.0;
};

inline BatchLoss pretrain_batch_loss(MaskedAudioModel& model, const Corpus& corpus, const std::vector<Tensor>& targets,
                                     const std::vector<std::size_t>& batch, std::uint64_t mask_seed, double gamma,
                                     const LossWeights& w, bool training) {
    const bool use_target = w.has_base() && uses_target(w.mode);
    const bool use_recon = w.has_base() && uses_recon(w.mode);
    std::vector<Tensor> latents, target_terms, recon_terms;
    BatchLoss out;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const Clip& clip = corpus.clips[batch[b]];
        const MaskPlan plan = sample_unstructured_mask(clip.patches.grid.size(), gamma, derive_seed(mask_seed, b));
        out.realized_gamma += plan.gamma() / static_cast<double>(batch.size());
        const Partitioned parts = partition(clip.patches, plan);
        const Tensor z = model.encode(parts.visible, plan.visible);
        latents.push_back(z);
        if (!use_target && !use_recon) continue;
        const Tensor decoded = model.decode(z, plan);
        if (use_target) {
            const Tensor y = model.project_head(decoded);
            const Partitioned t = split_targets(targets[batch[b]], plan);
            target_terms.push_back(target_loss(gather_rows(y, plan.visible), t.visible, gather_rows(y, plan.masked), t.masked));
        }
        if (use_recon) recon_terms.push_back(reconstruction_loss(model.reconstruct(gather_rows(decoded, plan.masked)), parts.masked));
    }
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    LossComponents parts;
    if (use_target) parts.target = scale(detail::sum_all(target_terms), inv_b);
    if (use_recon) parts.recon = scale(detail::sum_all(recon_terms), inv_b);
    if (w.has_cls()) parts.cls = detail::supervised_loss(corpus, batch, model.classify(latents, training), w.tau);
    out.loss = total_loss(parts, w);
    return out;
}

// Teacher targets for every clip, computed once from the full normalized spectrogram.
// A caller-owned `teacher` replaces the one built from `ts` (frozen_random only).
inline std::vector<Tensor> teacher_targets_for(const Corpus& corpus, const TeacherSpec& ts, const FrozenRandomTeacher* teacher = nullptr,
                                               std::size_t threads = worker_threads()) {
    std::vector<Tensor> out(corpus.clips.size());
    const std::size_t n = corpus.grid.size();
    if (ts.kind == TeacherKind::precomputed_file) {
        parallel_for(out.size(), threads, [&](std::size_t i) {
            out[i] = load_precomputed_targets(precomputed_target_path(ts, corpus.clips[i].path), n, ts.feature_dim);
        });
        return out;
    }
    std::optional<FrozenRandomTeacher> owned;
    if (!teacher) teacher = &owned.emplace(ts, corpus.grid);
    if (teacher->spec().feature_dim != ts.feature_dim) throw ConfigError("teacher feature width differs from the model's target head");
    parallel_for(out.size(), threads, [&](std::size_t i) { out[i] = teacher->targets(corpus.clips[i].patches); });
    return out;
}

// ---- checkpoints ----

struct TrainingState {
    std::string stage;        // "pretrain" or "finetune"
    std::size_t next_step = 0; // first step not yet taken
    AdamWState adam;
    std::vector<std::string> adam_names; // parameter name per optimizer slot
    LossBreakdown initial;     // probe loss before the first step
};

inline void save_checkpoint(const std::filesystem::path& path, MaskedAudioModel& model, const FeatureNorm& norm,
                            const RunConfig& cfg, const TrainingState& state) {
    Archive a = model_to_archive(model);
    a.header.set("kind", "checkpoint");
    a.header.set("stage", state.stage);
    a.header.set("norm.mean", exact_double(norm.mean));
    a.header.set("norm.std", exact_double(norm.std));
    a.header.set("train.next_step", std::to_string(state.next_step));
    a.header.set("adam.step", std::to_string(state.adam.step));
    a.header.set("probe.initial.target_term", exact_double(state.initial.target_term));
    a.header.set("probe.initial.cls_term", exact_double(state.initial.cls_term));
    a.header.set("probe.initial.recon_term", exact_double(state.initial.recon_term));
    a.header.set("probe.initial.total", exact_double(state.initial.total));
    const KeyValues settings = cfg.to_kv();
    for (const auto& [k, v] : settings.items()) a.header.set("config." + k, v);
    for (std::size_t k = 0; k < state.adam.m.size(); ++k) {
        a.blocks.push_back({"adam.m/" + state.adam_names[k], {state.adam.m[k].size()}, state.adam.m[k]});
        a.blocks.push_back({"adam.v/" + state.adam_names[k], {state.adam.v[k].size()}, state.adam.v[k]});
    }
    write_archive(path, a);
}

inline FeatureNorm checkpoint_norm(const Archive& a) {
    return {parse_double("norm.mean", a.header.get("norm.mean")), parse_double("norm.std", a.header.get("norm.std"))};
}

// Restores optimizer moments for `params` (missing entries start from zero).
inline TrainingState restore_training_state(const Archive& a, const std::vector<NamedParameter*>& params) {
    TrainingState s;
    s.stage = a.header.get("stage");
    s.next_step = parse_count("train.next_step", a.header.get("train.next_step"));
    s.adam.step = parse_count("adam.step", a.header.get("adam.step"));
    s.initial.target_term = parse_double("probe", a.header.get("probe.initial.target_term"));
    s.initial.cls_term = parse_double("probe", a.header.get("probe.initial.cls_term"));
    s.initial.recon_term = parse_double("probe", a.header.get("probe.initial.recon_term"));
    s.initial.total = parse_double("probe", a.header.get("probe.initial.total"));
    for (const NamedParameter* p : params) {
        s.adam_names.push_back(p->name);
        const ArchiveBlock* m = a.find("adam.m/" + p->name);
        const ArchiveBlock* v = a.find("adam.v/" + p->name);
        if (!m || !v || m->values.size() != p->tensor.numel() || v->values.size() != p->tensor.numel()) {
            throw FormatError("checkpoint: optimizer state for '" + p->name + "' is missing or mis-sized");
        }
        s.adam.m.push_back(m->values);
        s.adam.v.push_back(v->values);
    }
    return s;
}

// ---- evaluation ----

// Eval-mode forward of every clip in `indices` (no masking); records nothing on the tape.
inline EvalResult evaluate_model(const MaskedAudioModel& model, const Corpus& corpus, const std::vector<std::size_t>& indices,
                                 std::size_t threads = 1) {
    if (indices.empty()) throw InputError("evaluate: empty dataset");
    const std::size_t k = model.config().num_classes;
    EvalResult r;
    r.scores = {indices.size(), k, std::vector<double>(indices.size() * k)};
    parallel_for(indices.size(), threads, [&](std::size_t s) {
        NoGradGuard no_grad;
        const Tensor logits = model.forward_finetune(corpus.clips[indices[s]].patches);
        const auto z = logits.data();
        double* row = &r.scores.values[s * k];
        if (corpus.multi_label) {
            for (std::size_t c = 0; c < k; ++c) row[c] = 1.0 / (1.0 + std::exp(-z[c]));
        } else {
            const double mx = *std::max_element(z.begin(), z.end());
            double total = 0.0;
            for (std::size_t c = 0; c < k; ++c) total += row[c] = std::exp(z[c] - mx);
            for (std::size_t c = 0; c < k; ++c) row[c] /= total;
        }
    });
    ScoreTable labels{indices.size(), k, detail::label_matrix(corpus, indices, k).values()};
    if (!corpus.multi_label) {
        std::vector<std::size_t> y;
        for (std::size_t i : indices) y.push_back(corpus.clips[i].labels.front());
        r.accuracy = accuracy(r.scores, y);
    }
    r.map = mean_average_precision(r.scores, labels);
    return r;
}

// ---- pretraining ----

inline void prepare_out_dir(const RunConfig& cfg) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out, ec);
    if (ec) throw IoError("cannot create output directory " + cfg.out.string() + ": " + ec.message());
    std::ofstream f(cfg.out / "config.txt");
    if (!f) throw IoError("cannot write " + (cfg.out / "config.txt").string());
    f << cfg.to_text();
}

inline void check_corpus(const RunConfig& cfg, const Corpus& corpus) {
    const ModelConfig m = cfg.resolved_model();
    if (!(corpus.grid == m.grid())) {
        throw ConfigError("dataset patch grid " + std::to_string(corpus.grid.time_patches) + "x" + std::to_string(corpus.grid.freq_patches) +
                          " differs from the model grid " + std::to_string(m.time_patches) + "x" + std::to_string(m.freq_patches));
    }
    if (corpus.num_classes > m.num_classes) {
        throw ConfigError("dataset has " + std::to_string(corpus.num_classes) + " classes, model has " + std::to_string(m.num_classes));
    }
    if (corpus.train.empty()) throw InputError("dataset has no training clips");
}

// Pretrains in cfg.mode on the training split. Writes metrics.csv, probe.csv, config.txt and
// checkpoint.bin under cfg.out (plus ckpt_step<N>.bin every cfg.checkpoint_every steps).
// With `resume`, continues from that checkpoint's step with the same data order. `teacher`
// optionally supplies the frozen teacher instead of building one from the config.
inline MetricsReport pretrain(const RunConfig& cfg, const Corpus& corpus, const std::optional<std::filesystem::path>& resume = std::nullopt,
                              const FrozenRandomTeacher* teacher = nullptr) {
    cfg.validate();
    check_corpus(cfg, corpus);
    const LossWeights w = cfg.loss_weights();
    const double gamma = cfg.gamma();
    prepare_out_dir(cfg);

    std::vector<Tensor> targets;
    if (cfg.needs_teacher()) {
        check_teacher_dim(cfg.teacher_spec(), cfg.model.head_out_dim);
        targets = teacher_targets_for(corpus, cfg.teacher_spec(), teacher);
    }

    MaskedAudioModel model(cfg.resolved_model(), derive_seed(cfg.seed, detail::kInitTag));
    const bool has_masked = mask_count(gamma, corpus.grid.size()) > 0;
    const auto params = model.pretrain_parameters(w.has_base() && uses_target(w.mode), w.has_base() && uses_recon(w.mode), w.has_cls(), has_masked);

    // Fixed probe batch with fixed masks, evaluated without gradients in eval mode.
    std::vector<std::size_t> probe_batch(corpus.train.begin(), corpus.train.begin() + std::min<std::size_t>(16, corpus.train.size()));
    const std::uint64_t probe_seed = derive_seed(cfg.seed, detail::kProbeTag);
    auto probe = [&](std::size_t step) {
        NoGradGuard no_grad;
        const BatchLoss b = pretrain_batch_loss(model, corpus, targets, probe_batch, probe_seed, gamma, w, false);
        MetricsRow row{step, mode_name(cfg.mode), b.loss.breakdown, std::nullopt, std::nullopt, b.realized_gamma, 0.0};
        if (w.has_cls() && !corpus.eval.empty()) {
            // classification-branch quality on held-out clips, visible patches only
            std::vector<Tensor> latents;
            for (std::size_t b2 = 0; b2 < corpus.eval.size(); ++b2) {
                const Clip& clip = corpus.clips[corpus.eval[b2]];
                const MaskPlan plan = sample_unstructured_mask(clip.patches.grid.size(), gamma, derive_seed(probe_seed, 1000 + b2));
                latents.push_back(model.encode(partition(clip.patches, plan).visible, plan.visible));
            }
            const Tensor logits = model.classify(latents, false);
            const std::size_t k = logits.dim(1);
            ScoreTable scores{corpus.eval.size(), k, logits.values()};
            ScoreTable labels{corpus.eval.size(), k, detail::label_matrix(corpus, corpus.eval, k).values()};
            if (!corpus.multi_label) {
                std::vector<std::size_t> y;
                for (std::size_t i : corpus.eval) y.push_back(corpus.clips[i].labels.front());
                row.acc = accuracy(scores, y);
            }
            row.map = mean_average_precision(scores, labels);
        }
        return row;
    };

    TrainingState state;
    state.stage = "pretrain";
    for (const NamedParameter* p : params) state.adam_names.push_back(p->name);
    MetricsReport report;
    if (resume) {
        const Archive a = read_archive(*resume);
        if (a.header.get("stage") != "pretrain") {
            throw ConfigError("resume: " + resume->string() + " is a " + a.header.get("stage") + " checkpoint");
        }
        load_model_state(model, a);
        state = restore_training_state(a, params);
        report.initial = state.initial;
        spdlog::info("resuming pretraining at step {}", state.next_step);
    } else {
        const MetricsRow first = probe(0);
        report.probe.push_back(first);
        report.initial = state.initial = first.loss;
    }
    spdlog::info("pretrain {}: {} clips, gamma {}, {} steps, initial probe loss {}", mode_name(cfg.mode), corpus.train.size(), gamma,
                 cfg.steps, report.initial.total);

    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t step = state.next_step; step < cfg.steps; ++step) {
        const auto batch = detail::sample_batch(corpus.train, cfg.batch_size, derive_seed(cfg.seed, detail::kBatchTag, step));
        const BatchLoss b = pretrain_batch_loss(model, corpus, targets, batch, derive_seed(cfg.seed, detail::kMaskTag, step), gamma, w, true);
        detail::check_finite(b.loss.breakdown, step + 1);
        backward(b.loss.total);
        adamw_step(params, state.adam, cosine_lr(cfg.optim.lr, step, cfg.steps, cfg.warmup_frac), cfg.optim);
        model.params().zero_grad();
        state.next_step = step + 1;

        const double seconds = cfg.record_time ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() : 0.0;
        report.rows.push_back({step + 1, mode_name(cfg.mode), b.loss.breakdown, std::nullopt, std::nullopt, b.realized_gamma, seconds});
        spdlog::debug("step {} total {}", step + 1, b.loss.breakdown.total);
        if (cfg.eval_every && state.next_step % cfg.eval_every == 0 && state.next_step < cfg.steps) {
            report.probe.push_back(probe(state.next_step));
            spdlog::info("step {}: probe loss {}", state.next_step, report.probe.back().loss.total);
        }
        if (cfg.checkpoint_every && state.next_step % cfg.checkpoint_every == 0 && state.next_step < cfg.steps) {
            save_checkpoint(cfg.out / ("ckpt_step" + std::to_string(state.next_step) + ".bin"), model, corpus.norm, cfg, state);
        }
    }
    const MetricsRow last = probe(cfg.steps);
    report.probe.push_back(last);
    report.final = last.loss;
    spdlog::info("pretrain done: probe loss {} -> {}", report.initial.total, report.final.total);

    report.checkpoint = cfg.out / "checkpoint.bin";
    save_checkpoint(report.checkpoint, model, corpus.norm, cfg, state);
    write_metrics_csv(cfg.out / "metrics.csv", report.rows);
    write_metrics_csv(cfg.out / "probe.csv", report.probe);
    return report;
}

// ---- fine-tuning ----

// Encoder shape fields that must agree between a checkpoint and the fine-tuning config.
inline void check_encoder_compatible(const ModelConfig& stored, const ModelConfig& wanted) {
    std::string mismatches;
    const auto s = stored.fields(), t = wanted.fields();
    for (std::size_t i = 0; i < s.size(); ++i) {
        const std::string& name = s[i].first;
        const bool encoder_field = name == "embed_dim" || name == "encoder_layers" || name == "encoder_heads" || name == "mlp_ratio" ||
                                   name == "time_patches" || name == "freq_patches" || name == "patch";
        if (encoder_field && *s[i].second != *t[i].second) {
            mismatches += (mismatches.empty() ? "" : ", ") + name + " " + std::to_string(*s[i].second) + " vs " + std::to_string(*t[i].second);
        }
    }
    if (!mismatches.empty()) throw ConfigError("checkpoint encoder is incompatible with the config: " + mismatches);
}

// Copies encoder weights from a pretraining checkpoint; decoder and pretraining heads are dropped.
inline void load_encoder(MaskedAudioModel& model, const Archive& a) {
    check_encoder_compatible(ModelConfig::read(a.header), model.config());
    for (auto& p : model.params().items()) {
        if (p.name.rfind("encoder.", 0) != 0) continue;
        const ArchiveBlock* b = a.find(p.name);
        if (!b || b->shape != p.tensor.shape()) throw FormatError("checkpoint: encoder block '" + p.name + "' is missing or mis-shaped");
        std::copy(b->values.begin(), b->values.end(), p.tensor.mutable_data().begin());
    }
}

// Fine-tunes encoder + fresh task head with structured masking. Without `pretrained` the encoder
// starts from random initialization. The first step's mask plans go to mask_debug.txt.
inline MetricsReport finetune(const RunConfig& cfg, const Corpus& corpus, const std::optional<std::filesystem::path>& pretrained) {
    cfg.validate();
    check_corpus(cfg, corpus);
    prepare_out_dir(cfg);
    const FinetuneConfig& ft = cfg.finetune;

    MaskedAudioModel model(cfg.resolved_model(), derive_seed(cfg.seed, detail::kFinetuneTag, detail::kInitTag));
    if (pretrained) load_encoder(model, read_archive(*pretrained));
    const auto params = model.finetune_parameters();
    TrainingState state;
    state.stage = "finetune";
    for (const NamedParameter* p : params) state.adam_names.push_back(p->name);

    MetricsReport report;
    auto evaluate_row = [&](std::size_t step, const LossBreakdown& loss) {
        MetricsRow row{step, "finetune", loss, std::nullopt, std::nullopt, 0.0, 0.0};
        if (!corpus.eval.empty()) {
            const EvalResult r = evaluate_model(model, corpus, corpus.eval);
            row.acc = r.accuracy;
            row.map = r.map;
        }
        return row;
    };

    std::ofstream debug(cfg.out / "mask_debug.txt");
    if (!debug) throw IoError("cannot write " + (cfg.out / "mask_debug.txt").string());
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t step = 0; step < ft.steps; ++step) {
        const auto batch = detail::sample_batch(corpus.train, ft.batch_size, derive_seed(cfg.seed, detail::kFinetuneTag, detail::kBatchTag ^ step));
        std::vector<Tensor> logits;
        double gamma = 0.0;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Clip& clip = corpus.clips[batch[b]];
            const MaskPlan plan = sample_structured_mask(clip.patches.grid, ft.time_ratio, ft.freq_ratio,
                                                         derive_seed(derive_seed(cfg.seed, detail::kFinetuneTag, detail::kMaskTag ^ step), b));
            if (step == 0) write_mask_plan(debug, plan);
            gamma += plan.gamma() / static_cast<double>(batch.size());
            logits.push_back(model.forward_finetune(clip.patches, &plan));
        }
        const Tensor loss = detail::supervised_loss(corpus, batch, concat_rows(logits), 1.0);
        LossBreakdown breakdown;
        breakdown.cls_term = breakdown.total = loss.item();
        detail::check_finite(breakdown, step + 1);
        backward(loss);
        adamw_step(params, state.adam, cosine_lr(ft.lr, step, ft.steps, cfg.warmup_frac), cfg.optim);
        model.params().zero_grad();
        state.next_step = step + 1;
        const double seconds = cfg.record_time ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() : 0.0;
        report.rows.push_back({step + 1, "finetune", breakdown, std::nullopt, std::nullopt, gamma, seconds});
        if (ft.eval_every && state.next_step % ft.eval_every == 0 && state.next_step < ft.steps) {
            report.probe.push_back(evaluate_row(state.next_step, breakdown));
            spdlog::info("finetune step {}: loss {} eval acc {}", state.next_step, breakdown.total, report.probe.back().acc.value_or(-1.0));
        }
    }
    if (!report.rows.empty()) {
        report.initial = report.rows.front().loss;
        report.final = report.rows.back().loss;
    }
    report.probe.push_back(evaluate_row(ft.steps, report.final));
    if (!corpus.eval.empty()) report.eval = evaluate_model(model, corpus, corpus.eval);
    if (!corpus.multi_label) report.train_accuracy = evaluate_model(model, corpus, corpus.train).accuracy;
    spdlog::info("finetune done: eval acc {} map {}", report.probe.back().acc.value_or(-1.0), report.probe.back().map.value_or(-1.0));

    report.checkpoint = cfg.out / "checkpoint.bin";
    save_checkpoint(report.checkpoint, model, corpus.norm, cfg, state);
    write_metrics_csv(cfg.out / "metrics.csv", report.rows);
    write_metrics_csv(cfg.out / "probe.csv", report.probe);
    return report;
}

// Loads a checkpoint and evaluates every clip of the manifest, normalized with the checkpoint's statistics.
inline EvalResult evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest) {
    const Archive a = read_archive(checkpoint);
    auto model = model_from_archive(a);
    const ModelConfig& m = model->config();
    const Corpus corpus = load_corpus(manifest, m.time_patches * m.patch, checkpoint_norm(a));
    if (!(corpus.grid == m.grid())) throw ConfigError("dataset patch grid differs from the checkpoint's model grid");
    std::vector<std::size_t> all(corpus.clips.size());
    std::iota(all.begin(), all.end(), 0);
    return evaluate_model(*model, corpus, all, worker_threads());
}

// ---- ablation sweeps ----

enum class SweepAxis { mask_ratio, decoder_layers, lambda_cls, objectives };

inline SweepAxis parse_sweep_axis(const std::string& text) {
    if (text == "mask_ratio") return SweepAxis::mask_ratio;
    if (text == "decoder_layers") return SweepAxis::decoder_layers;
    if (text == "lambda_cls") return SweepAxis::lambda_cls;
    if (text == "objectives") return SweepAxis::objectives;
    throw ConfigError("unknown sweep axis '" + text + "' (expected mask_ratio, decoder_layers, lambda_cls or objectives)");
}

inline const char* sweep_axis_name(SweepAxis a) {
    switch (a) {
    case SweepAxis::mask_ratio: return "mask_ratio";
    case SweepAxis::decoder_layers: return "decoder_layers";
    case SweepAxis::lambda_cls: return "lambda_cls";
    case SweepAxis::objectives: return "objectives";
    }
    return "?";
}

inline RunConfig sweep_config(const RunConfig& base, SweepAxis axis, const std::string& value) {
    RunConfig c = base;
    switch (axis) {
    case SweepAxis::mask_ratio: c.mask_ratio = parse_double("mask_ratio", value); break;
    case SweepAxis::decoder_layers: c.model.decoder_layers = parse_count("decoder_layers", value); break;
    case SweepAxis::lambda_cls:
        if (!uses_cls(c.mode)) throw ConfigError(std::string("lambda_cls sweep needs a mode with a classification branch, not ") + mode_name(c.mode));
        c.lambda_cls = parse_double("lambda_cls", value);
        break;
    case SweepAxis::objectives: c.objectives = value; break;
    }
    c.out = base.out / (std::string(sweep_axis_name(axis)) + "_" + value);
    c.validate();
    return c;
}

struct SweepRow {
    std::string value;
    MetricsReport pretrain;
    std::optional<MetricsReport> finetune;
};

// One pretraining run per value with the shared seed, each followed by fine-tuning when
// base.finetune.steps > 0. Writes sweep.csv under base.out. All values are validated first.
inline std::vector<SweepRow> run_ablation_sweep(const RunConfig& base, const Corpus& corpus, SweepAxis axis,
                                                const std::vector<std::string>& values) {
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    std::vector<RunConfig> configs;
    for (const auto& v : values) configs.push_back(sweep_config(base, axis, v));
    std::vector<SweepRow> rows;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        SweepRow row{values[i], pretrain(configs[i], corpus), std::nullopt};
        if (base.finetune.steps > 0) {
            RunConfig ft = configs[i];
            ft.out = configs[i].out / "finetune";
            row.finetune = finetune(ft, corpus, row.pretrain.checkpoint);
        }
        rows.push_back(std::move(row));
    }
    std::filesystem::create_directories(base.out);
    std::ofstream f(base.out / "sweep.csv");
    if (!f) throw IoError("cannot write " + (base.out / "sweep.csv").string());
    f << sweep_axis_name(axis) << ",mode,initial_total,final_total,finetune_acc,finetune_map\n";
    for (const auto& r : rows) {
        std::string acc, map;
        if (r.finetune && r.finetune->eval) {
            acc = r.finetune->eval->accuracy ? exact_double(*r.finetune->eval->accuracy) : "";
            map = exact_double(r.finetune->eval->map);
        }
        f << r.value << ',' << mode_name(base.mode) << ',' << exact_double(r.pretrain.initial.total) << ','
          << exact_double(r.pretrain.final.total) << ',' << acc << ',' << map << '\n';
    }
    return rows;
}

} // namespace mamlab

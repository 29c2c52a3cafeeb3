#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "mamlab/trainer.hpp"
#include "synth_fixture.hpp"

namespace mamlab {
namespace {

using testing::default_corpus;
using testing::default_manifest;
using testing::scratch_dir;
using testing::slurp;
using testing::small_run;

std::vector<std::string> lines_of(const std::filesystem::path& p) {
    std::ifstream f(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(f, line);) out.push_back(line);
    return out;
}

std::vector<std::string> split(const std::string& line, char sep = ',') {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, sep);) out.push_back(cell);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

// ---- synthetic data ----

TEST(SynthDataset, DefaultSetHas200ClipsAndManifestLines) {
    const auto dir = default_manifest().parent_path();
    std::size_t wavs = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir)) wavs += e.path().extension() == ".wav";
    EXPECT_EQ(wavs, 200u);
    EXPECT_EQ(lines_of(default_manifest()).size(), 200u);
    const auto entries = read_manifest(default_manifest());
    std::vector<std::size_t> per_class(4, 0);
    for (const auto& e : entries) {
        ASSERT_EQ(e.labels.size(), 1u);
        ++per_class.at(e.labels[0]);
    }
    EXPECT_EQ(per_class, (std::vector<std::size_t>{50, 50, 50, 50}));
}

TEST(SynthDataset, SameSeedIsBitIdentical) {
    SynthDatasetSpec spec;
    spec.clips_per_class = 2;
    spec.seed = 9;
    spec.label_mode = LabelMode::multi;
    const auto a = generate_synth_dataset(spec, scratch_dir("synth_a"));
    const auto b = generate_synth_dataset(spec, scratch_dir("synth_b"));
    EXPECT_EQ(slurp(a), slurp(b));
    for (const auto& e : read_manifest(a)) EXPECT_EQ(slurp(e.path), slurp(b.parent_path() / e.path.filename()));
    spec.seed = 10;
    const auto c = generate_synth_dataset(spec, scratch_dir("synth_c"));
    EXPECT_NE(slurp(a.parent_path() / "clip_0000.wav"), slurp(c.parent_path() / "clip_0000.wav"));
}

TEST(SynthDataset, UnwritableDirectoryIsIoError) {
    const auto dir = scratch_dir("synth_blocked");
    std::ofstream(dir / "file") << "x";
    EXPECT_THROW(generate_synth_dataset(SynthDatasetSpec{}, dir / "file" / "sub"), IoError);
    SynthDatasetSpec bad;
    bad.num_classes = 0;
    EXPECT_THROW(generate_synth_dataset(bad, dir), ConfigError);
}

TEST(SynthDataset, NearestCentroidOnMeanLogMelSeparatesClasses) {
    // simple baseline: per-clip mean log-mel vector, class centroids from the training split
    const auto entries = read_manifest(default_manifest());
    std::vector<std::vector<double>> feats;
    for (const auto& e : entries) {
        const MelSpectrogram m = log_mel_spectrogram(read_wav(e.path));
        std::vector<double> f(m.mels, 0.0);
        for (std::size_t t = 0; t < m.frames; ++t) {
            for (std::size_t k = 0; k < m.mels; ++k) f[k] += m.at(t, k) / static_cast<double>(m.frames);
        }
        feats.push_back(std::move(f));
    }
    std::vector<std::vector<double>> centroid(4, std::vector<double>(128, 0.0));
    std::vector<double> count(4, 0.0);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (is_eval_index(i)) continue;
        const std::size_t c = entries[i].labels[0];
        for (std::size_t k = 0; k < 128; ++k) centroid[c][k] += feats[i][k];
        count[c] += 1.0;
    }
    for (std::size_t c = 0; c < 4; ++c) {
        for (double& v : centroid[c]) v /= count[c];
    }
    std::size_t hits = 0, total = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!is_eval_index(i)) continue;
        std::size_t best = 0;
        double best_d = INFINITY;
        for (std::size_t c = 0; c < 4; ++c) {
            double d = 0.0;
            for (std::size_t k = 0; k < 128; ++k) d += (feats[i][k] - centroid[c][k]) * (feats[i][k] - centroid[c][k]);
            if (d < best_d) best_d = d, best = c;
        }
        hits += best == entries[i].labels[0];
        ++total;
    }
    EXPECT_GT(static_cast<double>(hits) / static_cast<double>(total), 0.9);
}

TEST(Corpus, SplitAndTrainStatistics) {
    const Corpus& c = default_corpus();
    EXPECT_EQ(c.train.size(), 160u);
    EXPECT_EQ(c.eval.size(), 40u);
    EXPECT_EQ(c.num_classes, 4u);
    EXPECT_FALSE(c.multi_label);
    EXPECT_EQ(c.grid.time_patches, 13u);
    EXPECT_EQ(c.grid.freq_patches, 8u);
    double sum = 0.0, sq = 0.0, n = 0.0;
    for (std::size_t i : c.train) {
        for (double v : c.clips[i].patches.features.values()) sum += v, sq += v * v, n += 1.0;
    }
    EXPECT_NEAR(sum / n, 0.0, 1e-9);
    EXPECT_NEAR(sq / n, 1.0, 1e-9);
}

TEST(Corpus, EmptyManifestIsInputError) {
    const auto dir = scratch_dir("empty_manifest");
    std::ofstream(dir / "manifest.tsv").flush();
    EXPECT_THROW(load_corpus(dir / "manifest.tsv", 208), InputError);
    EXPECT_THROW(load_corpus(dir / "missing.tsv", 208), IoError);
}

TEST(ParallelFor, VisitsEveryIndexAndRethrows) {
    std::vector<int> seen(100, 0);
    parallel_for(100, 4, [&](std::size_t i) { seen[i] += 1; });
    EXPECT_EQ(std::count(seen.begin(), seen.end(), 1), 100);
    EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                     if (i == 7) throw InputError("boom");
                 }),
                 InputError);
}

// ---- configuration ----

TEST(RunConfigText, ParsesSectionsAndRoundTrips) {
    const std::string text = "# comment\n[run]\nmode = SupMAM\nseed = 7\n[mask]\nratio = 0.3\n[loss]\nlambda_cls = 0.05\n"
                             "[model]\nembed_dim = 32\n[teacher]\nsource = none\n";
    const RunConfig c = RunConfig::from_kv(parse_config_text(text, "inline"));
    EXPECT_EQ(c.mode, Mode::SupMAM);
    EXPECT_EQ(c.seed, 7u);
    EXPECT_DOUBLE_EQ(c.gamma(), 0.3);
    EXPECT_DOUBLE_EQ(c.loss_weights().lambda_cls, 0.05);
    EXPECT_EQ(c.model.embed_dim, 32u);
    EXPECT_EQ(c.teacher, TeacherSource::none);
    const RunConfig back = RunConfig::from_kv(parse_config_text(c.to_text(), "roundtrip"));
    EXPECT_EQ(back.to_text(), c.to_text());
    EXPECT_EQ(back.gamma(), c.gamma());
}

TEST(RunConfigText, ModeDefaults) {
    RunConfig c;
    c.mode = Mode::MAM_CLAP;
    EXPECT_DOUBLE_EQ(c.gamma(), 0.2);
    c.mode = Mode::SupMAM;
    EXPECT_DOUBLE_EQ(c.gamma(), 0.4);
    EXPECT_DOUBLE_EQ(c.loss_weights().lambda_cls, 0.01);
    c.mode = Mode::SupMAM_CLAP;
    EXPECT_DOUBLE_EQ(c.gamma(), 0.4);
    EXPECT_DOUBLE_EQ(c.loss_weights().lambda_cls, 1e-4);
    EXPECT_DOUBLE_EQ(c.loss_weights().tau, 10.0);
    EXPECT_DOUBLE_EQ(c.optim.lr, 2e-4);
    EXPECT_EQ(c.resolved_model().time_patches, 13u);
    c.clip_seconds = 10.0;
    EXPECT_EQ(c.resolved_model().time_patches, 64u);
}

TEST(RunConfigText, Errors) {
    RunConfig c;
    EXPECT_THROW(c.set("run.colour", "red"), ConfigError);
    EXPECT_THROW(c.set("model.depth", "3"), ConfigError);
    EXPECT_THROW(c.set("mask.ratio", "lots"), ConfigError);
    EXPECT_THROW(c.set("run.mode", "BYOL"), ConfigError);
    EXPECT_THROW(c.set("teacher.source", "oracle"), ConfigError);
    EXPECT_THROW(parse_config_text("[run\n", "bad"), ConfigError);
    EXPECT_THROW(load_run_config("/nonexistent/run.cfg"), IoError);
    c.mask_ratio = 1.5;
    EXPECT_THROW(c.validate(), ConfigError);
    c.mask_ratio.reset();
    c.mode = Mode::MAM;
    c.mask_ratio = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

// ---- pretraining ----

MetricsReport quick_pretrain(Mode mode, const std::string& name, std::size_t steps, std::uint64_t seed = 0) {
    return pretrain(small_run(mode, seed, scratch_dir(name), steps), default_corpus());
}

TEST(Pretrain, ModeContractInLoggedBreakdown) {
    for (Mode m : {Mode::MAM, Mode::MAM_CLAP, Mode::SupMAM, Mode::SupMAM_CLAP}) {
        SCOPED_TRACE(mode_name(m));
        const RunConfig cfg = small_run(m, 1, scratch_dir("contract"), 3);
        const MetricsReport r = pretrain(cfg, default_corpus());
        const auto rows = lines_of(cfg.out / "metrics.csv");
        ASSERT_EQ(rows.size(), 4u);
        EXPECT_EQ(rows[0], kMetricsHeader);
        const LossWeights w = cfg.loss_weights();
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const auto cells = split(rows[i]);
            ASSERT_EQ(cells.size(), 10u);
            EXPECT_EQ(cells[1], mode_name(m));
            const LossBreakdown b{std::stod(cells[2]), std::stod(cells[3]), std::stod(cells[4]), std::stod(cells[5])};
            EXPECT_EQ(b.target_term > 0.0, uses_target(m));
            EXPECT_EQ(b.cls_term > 0.0, uses_cls(m));
            EXPECT_EQ(b.recon_term > 0.0, uses_recon(m));
            EXPECT_NEAR(recombine(b, w), b.total, 1e-12);
            EXPECT_NEAR(std::stod(cells[8]), std::floor(cfg.gamma() * 104 + 1e-9) / 104.0, 1e-15);
        }
        EXPECT_TRUE(std::filesystem::exists(r.checkpoint));
    }
}

TEST(Pretrain, MamLossDescends) {
    const MetricsReport r = quick_pretrain(Mode::MAM, "mam_descent", 300);
    EXPECT_LT(r.final.recon_term, r.initial.recon_term);
    EXPECT_EQ(r.final.target_term, 0.0);
}

TEST(Pretrain, ClapModeWithoutTeacherFailsBeforeTraining) {
    RunConfig cfg = small_run(Mode::MAM_CLAP, 0, scratch_dir("no_teacher") / "out", 3);
    cfg.teacher = TeacherSource::none;
    EXPECT_THROW(pretrain(cfg, default_corpus()), ConfigError);
    EXPECT_FALSE(std::filesystem::exists(cfg.out));
}

TEST(Pretrain, RerunIsBitIdentical) {
    const RunConfig a = small_run(Mode::SupMAM_CLAP, 3, scratch_dir("rerun_a"), 4);
    RunConfig b = a;
    b.out = scratch_dir("rerun_b");
    pretrain(a, default_corpus());
    pretrain(b, default_corpus());
    EXPECT_EQ(slurp(a.out / "metrics.csv"), slurp(b.out / "metrics.csv"));
    EXPECT_EQ(slurp(a.out / "probe.csv"), slurp(b.out / "probe.csv"));
    Archive ca = read_archive(a.out / "checkpoint.bin"), cb = read_archive(b.out / "checkpoint.bin");
    ASSERT_EQ(ca.blocks.size(), cb.blocks.size());
    for (std::size_t i = 0; i < ca.blocks.size(); ++i) EXPECT_EQ(ca.blocks[i].values, cb.blocks[i].values) << ca.blocks[i].name;
}

TEST(Pretrain, ResumeReproducesUninterruptedTrajectory) {
    RunConfig full = small_run(Mode::SupMAM, 5, scratch_dir("resume_full"), 6);
    full.checkpoint_every = 3;
    pretrain(full, default_corpus());
    ASSERT_TRUE(std::filesystem::exists(full.out / "ckpt_step3.bin"));

    RunConfig resumed = full;
    resumed.out = scratch_dir("resume_tail");
    const MetricsReport r = pretrain(resumed, default_corpus(), full.out / "ckpt_step3.bin");
    ASSERT_EQ(r.rows.size(), 3u);
    EXPECT_EQ(r.rows.front().step, 4u);

    const auto whole = lines_of(full.out / "metrics.csv");
    const auto tail = lines_of(resumed.out / "metrics.csv");
    ASSERT_EQ(tail.size(), 4u);
    for (std::size_t i = 1; i < tail.size(); ++i) EXPECT_EQ(tail[i], whole[i + 3]);
    const Archive a = read_archive(full.out / "checkpoint.bin"), b = read_archive(resumed.out / "checkpoint.bin");
    ASSERT_EQ(a.blocks.size(), b.blocks.size());
    for (std::size_t i = 0; i < a.blocks.size(); ++i) {
        EXPECT_EQ(a.blocks[i].name, b.blocks[i].name);
        EXPECT_EQ(a.blocks[i].values, b.blocks[i].values) << a.blocks[i].name;
    }
}

TEST(Pretrain, ResumeFromFinetuneCheckpointIsRejected) {
    RunConfig cfg = small_run(Mode::SupMAM, 0, scratch_dir("resume_wrong"), 1);
    cfg.finetune.steps = 1;
    cfg.finetune.eval_every = 0;
    finetune(cfg, default_corpus(), std::nullopt);
    EXPECT_THROW(pretrain(cfg, default_corpus(), cfg.out / "checkpoint.bin"), ConfigError);
}

TEST(Pretrain, NonFiniteLossIsNumericError) {
    Corpus broken = default_corpus();
    for (Clip& c : broken.clips) {
        std::vector<double> v = c.patches.features.values();
        v[0] = NAN;
        c.patches.features = Tensor::matrix(c.patches.features.dim(0), c.patches.features.dim(1), std::move(v));
    }
    const RunConfig cfg = small_run(Mode::MAM, 0, scratch_dir("nan"), 2);
    EXPECT_THROW(pretrain(cfg, broken), NumericError);
}

TEST(Pretrain, TeacherIsUntouchedAndIndependentOfMaskPlan) {
    const Corpus& corpus = default_corpus();
    const RunConfig cfg = small_run(Mode::MAM_CLAP, 2, scratch_dir("teacher_frozen"), 3);
    const FrozenRandomTeacher teacher(cfg.teacher_spec(), corpus.grid);
    std::vector<std::vector<double>> before;
    for (const auto& p : teacher.params().items()) before.push_back(p.tensor.values());
    const Tensor t0 = teacher.targets(corpus.clips[0].patches);

    pretrain(cfg, corpus, std::nullopt, &teacher);

    std::size_t k = 0;
    for (const auto& p : teacher.params().items()) {
        EXPECT_EQ(p.tensor.values(), before[k++]) << p.name;
        EXPECT_FALSE(p.tensor.requires_grad());
    }
    // the same clip under different plans splits one fixed target matrix
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const MaskPlan plan = sample_unstructured_mask(corpus.grid.size(), 0.4, seed);
        const Partitioned parts = split_targets(teacher.targets(corpus.clips[0].patches), plan);
        EXPECT_EQ(scatter_back(parts.visible, parts.masked, plan).values(), t0.values());
    }
}

// ---- fine-tuning and evaluation ----

TEST(Finetune, ZeroStructuredRatiosMaskNothing) {
    RunConfig cfg = small_run(Mode::SupMAM, 0, scratch_dir("ft_zero"), 1);
    cfg.finetune.steps = 1;
    cfg.finetune.batch_size = 4;
    cfg.finetune.time_ratio = 0.0;
    cfg.finetune.freq_ratio = 0.0;
    cfg.finetune.eval_every = 0;
    finetune(cfg, default_corpus(), std::nullopt);
    std::ifstream f(cfg.out / "mask_debug.txt");
    for (int i = 0; i < 4; ++i) {
        const MaskPlan plan = read_mask_plan(f);
        EXPECT_EQ(plan.total, 104u);
        EXPECT_TRUE(plan.masked.empty());
    }
}

TEST(Finetune, DefaultStructuredRatiosDumpWholeRowsAndColumns) {
    RunConfig cfg = small_run(Mode::SupMAM, 0, scratch_dir("ft_default"), 1);
    cfg.finetune.steps = 1;
    cfg.finetune.batch_size = 2;
    cfg.finetune.eval_every = 0;
    finetune(cfg, default_corpus(), std::nullopt);
    std::ifstream f(cfg.out / "mask_debug.txt");
    const MaskPlan plan = read_mask_plan(f);
    // 13x8 grid: floor(0.2*13) = 2 time columns, floor(0.2*8) = 1 frequency row
    EXPECT_EQ(plan.masked.size(), 2u * 8u + 1u * 13u - 2u);
}

TEST(Finetune, IncompatibleCheckpointListsMismatches) {
    const RunConfig pre = small_run(Mode::MAM, 0, scratch_dir("ft_incompat_pre"), 1);
    pretrain(pre, default_corpus());
    RunConfig ft = small_run(Mode::MAM, 0, scratch_dir("ft_incompat"), 1);
    ft.model.embed_dim = 32;
    ft.model.encoder_layers = 2;
    ft.finetune.steps = 1;
    try {
        finetune(ft, default_corpus(), pre.out / "checkpoint.bin");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("embed_dim"), std::string::npos) << msg;
        EXPECT_NE(msg.find("encoder_layers"), std::string::npos) << msg;
    }
}

TEST(Finetune, PretrainedReachesHighTrainAccuracyWithin500Steps) {
    const RunConfig pre = small_run(Mode::SupMAM, 1, scratch_dir("ft_overfit_pre"), 300);
    pretrain(pre, default_corpus());
    RunConfig ft = small_run(Mode::SupMAM, 1, scratch_dir("ft_overfit"), 300);
    ft.finetune.steps = 300;
    const MetricsReport r = finetune(ft, default_corpus(), pre.out / "checkpoint.bin");
    ASSERT_TRUE(r.train_accuracy.has_value());
    EXPECT_GE(*r.train_accuracy, 0.95);
    ASSERT_TRUE(r.eval.has_value());
    EXPECT_GE(r.eval->map, 0.0);
    EXPECT_LE(r.eval->map, 1.0);
}

TEST(Evaluate, RepeatedEvaluationIsBitIdenticalAndRecordsNothing) {
    const RunConfig cfg = small_run(Mode::SupMAM, 0, scratch_dir("eval_repeat"), 2);
    pretrain(cfg, default_corpus());
    const std::uint64_t recorded = recorded_node_count();
    const EvalResult a = evaluate(cfg.out / "checkpoint.bin", default_manifest());
    const EvalResult b = evaluate(cfg.out / "checkpoint.bin", default_manifest());
    EXPECT_EQ(recorded_node_count(), recorded);
    EXPECT_EQ(a.scores.values, b.scores.values);
    EXPECT_EQ(a.accuracy, b.accuracy);
    EXPECT_EQ(a.map, b.map);
    EXPECT_EQ(a.scores.samples, 200u);
}

TEST(Evaluate, SaveLoadRoundTripIsBitIdentical) {
    const Corpus& corpus = default_corpus();
    MaskedAudioModel model(RunConfig{}.resolved_model(), 17);
    const EvalResult before = evaluate_model(model, corpus, corpus.eval);
    const auto path = scratch_dir("eval_roundtrip") / "model.bin";
    write_archive(path, model_to_archive(model));
    const auto loaded = model_from_archive(read_archive(path));
    const EvalResult after = evaluate_model(*loaded, corpus, corpus.eval);
    EXPECT_EQ(before.scores.values, after.scores.values);
    EXPECT_EQ(before.accuracy, after.accuracy);
    EXPECT_EQ(before.map, after.map);
}

TEST(Evaluate, EmptyInputIsInputError) {
    MaskedAudioModel model(RunConfig{}.resolved_model(), 1);
    EXPECT_THROW(evaluate_model(model, default_corpus(), {}), InputError);
}

// ---- ablation sweeps ----

TEST(Sweep, SingleValueMatchesPlainPretrain) {
    RunConfig base = small_run(Mode::MAM_CLAP, 4, scratch_dir("sweep_single"), 3);
    base.finetune.steps = 0;
    const auto rows = run_ablation_sweep(base, default_corpus(), SweepAxis::mask_ratio, {"0.3"});
    RunConfig plain = base;
    plain.mask_ratio = 0.3;
    plain.out = scratch_dir("sweep_plain");
    pretrain(plain, default_corpus());
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(slurp(rows[0].pretrain.checkpoint.parent_path() / "metrics.csv"), slurp(plain.out / "metrics.csv"));
}

TEST(Sweep, MaskRatioAxisWritesOneRowPerValue) {
    RunConfig base = small_run(Mode::MAM_CLAP, 0, scratch_dir("sweep_ratio"), 2);
    base.finetune.steps = 0;
    run_ablation_sweep(base, default_corpus(), SweepAxis::mask_ratio, {"0.1", "0.2", "0.3"});
    const auto rows = lines_of(base.out / "sweep.csv");
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(split(rows[0])[0], "mask_ratio");
    EXPECT_EQ(split(rows[3])[0], "0.3");
}

TEST(Sweep, ObjectivesAxisRunsEachVariant) {
    RunConfig base = small_run(Mode::SupMAM, 0, scratch_dir("sweep_obj"), 2);
    base.finetune.steps = 2;
    base.finetune.eval_every = 0;
    const auto rows = run_ablation_sweep(base, default_corpus(), SweepAxis::objectives, {"rec", "cls", "rec+cls"});
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].pretrain.final.cls_term, 0.0);
    EXPECT_GT(rows[0].pretrain.final.recon_term, 0.0);
    EXPECT_EQ(rows[1].pretrain.final.recon_term, 0.0);
    EXPECT_GT(rows[1].pretrain.final.cls_term, 0.0);
    EXPECT_GT(rows[2].pretrain.final.recon_term, 0.0);
    EXPECT_GT(rows[2].pretrain.final.cls_term, 0.0);
    for (const auto& r : rows) ASSERT_TRUE(r.finetune.has_value());
}

TEST(Sweep, InvalidAxisOrValueIsConfigErrorBeforeAnyRun) {
    EXPECT_THROW(parse_sweep_axis("depth"), ConfigError);
    RunConfig base = small_run(Mode::MAM, 0, scratch_dir("sweep_bad") / "out", 2);
    EXPECT_THROW(run_ablation_sweep(base, default_corpus(), SweepAxis::mask_ratio, {"0.5", "1.5"}), ConfigError);
    EXPECT_FALSE(std::filesystem::exists(base.out));
    EXPECT_THROW(run_ablation_sweep(base, default_corpus(), SweepAxis::lambda_cls, {"0.1"}), ConfigError);
    EXPECT_THROW(run_ablation_sweep(base, default_corpus(), SweepAxis::objectives, {"target"}), ConfigError);
}

} // namespace
} // namespace mamlab

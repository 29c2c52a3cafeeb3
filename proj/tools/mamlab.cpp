// mamlab command-line driver: synth, pretrain, finetune, eval, sweep, gradcheck.
//
// Exit codes: 0 success, 2 configuration error, 3 I/O or format error, 4 numeric failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "mamlab/gradient_suite.hpp"
#include "mamlab/trainer.hpp"

namespace {

using namespace mamlab;

// Flags shared by the training subcommands; applied on top of --config.
struct RunFlags {
    std::string config;
    std::string mode;
    std::optional<double> mask_ratio;
    std::optional<double> lambda_cls;
    std::optional<double> tau;
    std::string teacher;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string manifest;
    std::optional<std::size_t> steps;
    std::vector<std::string> overrides;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config, "Run configuration file ([section] key = value)");
        cmd->add_option("--mode", mode, "MAM, MAM-CLAP, SupMAM or SupMAM-CLAP");
        cmd->add_option("--mask-ratio", mask_ratio, "Pretraining mask ratio (default depends on mode)");
        cmd->add_option("--lambda-cls", lambda_cls, "Weight of the classification term");
        cmd->add_option("--tau", tau, "Classification temperature");
        cmd->add_option("--teacher", teacher, "frozen-random, none or file:<path>");
        cmd->add_option("--seed", seed, "Run seed");
        cmd->add_option("--out", out, "Output directory");
        cmd->add_option("--manifest", manifest, "Dataset manifest (default: synthesize one under <out>/data)");
        cmd->add_option("--steps", steps, "Optimization steps of this stage");
        cmd->add_option("--set", overrides, "Extra setting section.key=value (repeatable)");
    }

    RunConfig resolve(bool finetune_stage) const {
        RunConfig c = config.empty() ? RunConfig{} : load_run_config(config);
        for (const auto& o : overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + o + "'");
            c.set(o.substr(0, eq), o.substr(eq + 1));
        }
        if (!mode.empty()) c.mode = parse_mode(mode);
        if (mask_ratio) c.mask_ratio = *mask_ratio;
        if (lambda_cls) c.lambda_cls = *lambda_cls;
        if (tau) c.tau = *tau;
        if (!teacher.empty()) c.set_teacher(teacher);
        if (seed) c.seed = *seed;
        if (!out.empty()) c.out = out;
        if (!manifest.empty()) c.manifest = manifest;
        if (steps) (finetune_stage ? c.finetune.steps : c.steps) = *steps;
        c.validate();
        return c;
    }
};

std::filesystem::path dataset_for(const RunConfig& c) {
    if (!c.manifest.empty()) return c.manifest;
    SynthDatasetSpec spec = c.synth;
    spec.clip_seconds = c.clip_seconds;
    spdlog::info("no manifest given; synthesizing {} clips under {}", spec.num_classes * spec.clips_per_class, (c.out / "data").string());
    return generate_synth_dataset(spec, c.out / "data");
}

std::string opt_text(const std::optional<double>& v) { return v ? exact_double(*v) : "n/a"; }

void print_eval(const EvalResult& r) {
    std::printf("samples %zu accuracy %s map %s\n", r.scores.samples, opt_text(r.accuracy).c_str(), exact_double(r.map).c_str());
}

int run(int argc, char** argv) {
    CLI::App app{"Masked audio modeling lab: pretraining objectives on log-mel spectrogram patches"};
    app.require_subcommand(1);
    bool verbose = false, quiet = false;
    app.add_flag("-v,--verbose", verbose, "Debug logging");
    app.add_flag("-q,--quiet", quiet, "Warnings only");

    // synth
    auto* synth = app.add_subcommand("synth", "Write a synthetic labelled WAV dataset and manifest");
    SynthDatasetSpec sspec;
    std::string synth_out = "data/synth";
    bool multi = false;
    synth->add_option("--out", synth_out, "Output directory");
    synth->add_option("--classes", sspec.num_classes, "Number of classes");
    synth->add_option("--clips-per-class", sspec.clips_per_class, "Clips per class");
    synth->add_option("--seconds", sspec.clip_seconds, "Clip length in seconds");
    synth->add_option("--seed", sspec.seed, "Generator seed");
    synth->add_flag("--multi-label", multi, "Add random secondary events");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "Pretrain in one of the four modes");
    RunFlags pre_flags;
    pre_flags.attach(pre);
    std::string resume;
    pre->add_option("--resume", resume, "Continue from a pretraining checkpoint");

    // finetune
    auto* ft = app.add_subcommand("finetune", "Fine-tune the encoder with a fresh task head");
    RunFlags ft_flags;
    ft_flags.attach(ft);
    std::string ft_checkpoint;
    ft->add_option("--checkpoint", ft_checkpoint, "Pretrained checkpoint (omit to start from random init)");

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
    std::string ev_checkpoint, ev_manifest;
    ev->add_option("--checkpoint", ev_checkpoint, "Checkpoint file")->required();
    ev->add_option("--manifest", ev_manifest, "Dataset manifest")->required();

    // sweep
    auto* sw = app.add_subcommand("sweep", "Ablation sweep over one axis");
    RunFlags sw_flags;
    sw_flags.attach(sw);
    std::string axis;
    std::vector<std::string> values;
    sw->add_option("--axis", axis, "mask_ratio, decoder_layers, lambda_cls or objectives")->required();
    sw->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every primitive, loss and objective");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::warn : spdlog::level::info);

    if (synth->parsed()) {
        sspec.label_mode = multi ? LabelMode::multi : LabelMode::single;
        const auto manifest = generate_synth_dataset(sspec, synth_out);
        std::printf("%s\n", manifest.string().c_str());
    } else if (pre->parsed()) {
        const RunConfig c = pre_flags.resolve(false);
        std::optional<std::filesystem::path> from;
        std::optional<FeatureNorm> norm;
        if (!resume.empty()) {
            from = resume;
            norm = checkpoint_norm(read_archive(*from));
        }
        const Corpus corpus = load_corpus(dataset_for(c), c.target_frames(), norm);
        const MetricsReport r = pretrain(c, corpus, from);
        std::printf("probe loss %s -> %s\ncheckpoint %s\n", exact_double(r.initial.total).c_str(), exact_double(r.final.total).c_str(),
                    r.checkpoint.string().c_str());
    } else if (ft->parsed()) {
        const RunConfig c = ft_flags.resolve(true);
        std::optional<std::filesystem::path> from;
        std::optional<FeatureNorm> norm;
        if (!ft_checkpoint.empty()) {
            from = ft_checkpoint;
            norm = checkpoint_norm(read_archive(*from));
        }
        const Corpus corpus = load_corpus(dataset_for(c), c.target_frames(), norm);
        const MetricsReport r = finetune(c, corpus, from);
        if (r.eval) print_eval(*r.eval);
        std::printf("train accuracy %s\ncheckpoint %s\n", opt_text(r.train_accuracy).c_str(), r.checkpoint.string().c_str());
    } else if (ev->parsed()) {
        print_eval(evaluate(ev_checkpoint, ev_manifest));
    } else if (sw->parsed()) {
        const RunConfig c = sw_flags.resolve(false);
        const SweepAxis a = parse_sweep_axis(axis);
        for (const auto& v : values) sweep_config(c, a, v); // reject bad values before loading data
        const Corpus corpus = load_corpus(dataset_for(c), c.target_frames());
        run_ablation_sweep(c, corpus, a, values);
        std::printf("%s\n", (c.out / "sweep.csv").string().c_str());
    } else if (gc->parsed()) {
        bool ok = true;
        for (const auto& check : run_gradient_suite()) {
            std::printf("%-4s %-36s max rel err %.3e (< %.0e)\n", check.passed() ? "ok" : "FAIL", check.name.c_str(), check.error,
                        check.tolerance);
            ok = ok && check.passed();
        }
        if (!ok) return 4;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const mamlab::Error& e) {
        spdlog::error("{}", e.what());
        return e.exit_code();
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
}

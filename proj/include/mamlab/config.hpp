#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

#include <fmt/format.h>

#include "mamlab/model.hpp"
#include "mamlab/objectives.hpp"
#include "mamlab/optim.hpp"
#include "mamlab/synth.hpp"
#include "mamlab/teacher.hpp"

namespace mamlab {

// Shortest decimal text that reads back to the same double.
inline std::string exact_double(double x) { return fmt::format("{}", x); }

inline double parse_double(const std::string& key, const std::string& text) {
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size()) throw ConfigError(key + ": '" + text + "' is not a number");
    return v;
}

inline std::uint64_t parse_count(const std::string& key, const std::string& text) {
    if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError(key + ": '" + text + "' is not a non-negative integer");
    }
    try {
        return std::stoull(text);
    } catch (const std::exception&) {
        throw ConfigError(key + ": '" + text + "' is out of range");
    }
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw ConfigError(key + ": '" + text + "' is not a boolean");
}

// "[section]" headers and "key = value" lines; '#' starts a comment. Keys come back as "section.key".
inline KeyValues parse_config_text(const std::string& text, const std::string& source = "config") {
    KeyValues kv;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(source + ":" + std::to_string(lineno) + ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
        kv.set(section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
    }
    return kv;
}

enum class TeacherSource { none, frozen_random, file };

struct FinetuneConfig {
    std::size_t steps = 300;
    std::size_t batch_size = 8;
    double lr = 5e-4;
    double time_ratio = 0.2;
    double freq_ratio = 0.2;
    std::size_t eval_every = 100;
};

struct RunConfig {
    Mode mode = Mode::MAM_CLAP;
    ModelConfig model;
    bool grid_from_clip = true; // derive model.time_patches from the clip length

    std::optional<double> mask_ratio;
    std::optional<double> lambda_cls;
    double tau = 10.0;
    std::string objectives; // "" = the mode's full objective; see loss_weights()

    AdamWConfig optim;
    std::size_t batch_size = 8;
    std::size_t steps = 1000;
    double warmup_frac = 0.05;
    std::size_t checkpoint_every = 0; // 0: only the final checkpoint
    std::size_t eval_every = 0;       // pretraining probe interval, 0: start and end only

    std::filesystem::path manifest;
    double clip_seconds = 2.0;
    SynthDatasetSpec synth;

    TeacherSource teacher = TeacherSource::frozen_random;
    std::filesystem::path teacher_path;
    std::uint64_t teacher_seed = 1234;
    bool teacher_normalize = true;

    FinetuneConfig finetune;

    std::uint64_t seed = 0;
    std::filesystem::path out = "runs/default";
    bool record_time = false; // wall-clock seconds in the metrics CSV (breaks bit-identical reruns)

    static double default_mask_ratio(Mode m) {
        switch (m) {
        case Mode::MAM: return 0.8;
        case Mode::MAM_CLAP: return 0.2;
        case Mode::SupMAM:
        case Mode::SupMAM_CLAP: return 0.4;
        }
        return 0.2;
    }

    static double default_lambda(Mode m) {
        switch (m) {
        case Mode::SupMAM: return 0.01;
        case Mode::SupMAM_CLAP: return 1e-4;
        default: return 0.0;
        }
    }

    double gamma() const { return mask_ratio.value_or(default_mask_ratio(mode)); }

    std::size_t target_frames() const { return grid_frames_for_seconds(clip_seconds, model.patch); }

    // Model config with the time extent of the grid matched to the clip length.
    ModelConfig resolved_model() const {
        ModelConfig m = model;
        if (grid_from_clip) m.time_patches = target_frames() / m.patch;
        return m;
    }

    LossWeights loss_weights() const {
        LossWeights w;
        w.mode = mode;
        w.tau = tau;
        w.lambda_cls = uses_cls(mode) ? lambda_cls.value_or(default_lambda(mode)) : 0.0;
        if (!objectives.empty()) {
            const std::string base = uses_target(mode) ? "target" : "rec";
            if (objectives == base) {
                w.drop_cls = true;
            } else if (objectives == "cls" && uses_cls(mode)) {
                w.drop_base = true;
            } else if (objectives != base + "+cls" || !uses_cls(mode)) {
                throw ConfigError("objectives '" + objectives + "' is not available in mode " + mode_name(mode));
            }
        }
        return w;
    }

    TeacherSpec teacher_spec() const {
        TeacherSpec ts;
        ts.kind = teacher == TeacherSource::file ? TeacherKind::precomputed_file : TeacherKind::frozen_random;
        ts.feature_dim = model.head_out_dim;
        ts.seed = teacher_seed;
        ts.normalize = teacher_normalize;
        ts.path = teacher_path;
        return ts;
    }

    bool needs_teacher() const { return uses_target(mode) && loss_weights().has_base(); }

    void validate() const {
        resolved_model().validate();
        const LossWeights w = loss_weights();
        w.validate();
        try {
            check_ratio(gamma(), "mask ratio");
            check_ratio(finetune.time_ratio, "fine-tune time mask ratio");
            check_ratio(finetune.freq_ratio, "fine-tune frequency mask ratio");
        } catch (const ParameterError& e) {
            throw ConfigError(e.what());
        }
        if (uses_recon(mode) && w.has_base() && gamma() == 0.0) throw ConfigError("reconstruction needs a mask ratio above 0");
        if (needs_teacher() && teacher == TeacherSource::none) {
            throw ConfigError(std::string("mode ") + mode_name(mode) + " needs a teacher (--teacher frozen-random or file:<path>)");
        }
        if (batch_size == 0 || finetune.batch_size == 0) throw ConfigError("batch size must be positive");
        if (w.has_cls() && batch_size < 2) throw ConfigError("the classification branch needs batch_size >= 2 for batch normalization");
        if (!(optim.lr > 0.0) || !(finetune.lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("warmup_frac must lie in [0, 1)");
        if (!(clip_seconds > 0.0)) throw ConfigError("clip_seconds must be positive");
    }

    void set_teacher(const std::string& text) {
        if (text == "frozen-random" || text == "frozen_random") {
            teacher = TeacherSource::frozen_random;
        } else if (text == "none") {
            teacher = TeacherSource::none;
        } else if (text.rfind("file:", 0) == 0 && text.size() > 5) {
            teacher = TeacherSource::file;
            teacher_path = text.substr(5);
        } else {
            throw ConfigError("teacher: expected frozen-random, none or file:<path>, got '" + text + "'");
        }
    }

    std::string teacher_text() const {
        switch (teacher) {
        case TeacherSource::none: return "none";
        case TeacherSource::frozen_random: return "frozen-random";
        case TeacherSource::file: return "file:" + teacher_path.string();
        }
        return "none";
    }

    // Applies one "section.key" setting.
    void set(const std::string& key, const std::string& value) {
        using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;
        static const std::map<std::string, Setter> setters = [] {
            std::map<std::string, Setter> s;
            auto count = [](std::size_t RunConfig::*field) {
                return Setter([field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_count(k, v); });
            };
            auto real = [](double RunConfig::*field) {
                return Setter([field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_double(k, v); });
            };
            s["run.mode"] = [](RunConfig& c, const std::string&, const std::string& v) { c.mode = parse_mode(v); };
            s["run.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_count(k, v); };
            s["run.out"] = [](RunConfig& c, const std::string&, const std::string& v) { c.out = v; };
            s["run.record_time"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.record_time = parse_bool(k, v); };
            s["data.manifest"] = [](RunConfig& c, const std::string&, const std::string& v) { c.manifest = v; };
            s["data.clip_seconds"] = real(&RunConfig::clip_seconds);
            s["mask.ratio"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.mask_ratio = parse_double(k, v); };
            s["loss.lambda_cls"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.lambda_cls = parse_double(k, v); };
            s["loss.tau"] = real(&RunConfig::tau);
            s["loss.objectives"] = [](RunConfig& c, const std::string&, const std::string& v) { c.objectives = v; };
            s["optim.lr"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.optim.lr = parse_double(k, v); };
            s["optim.weight_decay"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.optim.weight_decay = parse_double(k, v); };
            s["optim.beta1"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.optim.beta1 = parse_double(k, v); };
            s["optim.beta2"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.optim.beta2 = parse_double(k, v); };
            s["optim.eps"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.optim.eps = parse_double(k, v); };
            s["optim.warmup_frac"] = real(&RunConfig::warmup_frac);
            s["optim.batch_size"] = count(&RunConfig::batch_size);
            s["optim.steps"] = count(&RunConfig::steps);
            s["optim.checkpoint_every"] = count(&RunConfig::checkpoint_every);
            s["optim.eval_every"] = count(&RunConfig::eval_every);
            s["teacher.source"] = [](RunConfig& c, const std::string&, const std::string& v) { c.set_teacher(v); };
            s["teacher.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.teacher_seed = parse_count(k, v); };
            s["teacher.normalize"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.teacher_normalize = parse_bool(k, v); };
            s["finetune.steps"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.finetune.steps = parse_count(k, v); };
            s["finetune.batch_size"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.finetune.batch_size = parse_count(k, v); };
            s["finetune.lr"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.finetune.lr = parse_double(k, v); };
            s["finetune.time_ratio"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.finetune.time_ratio = parse_double(k, v); };
            s["finetune.freq_ratio"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.finetune.freq_ratio = parse_double(k, v); };
            s["finetune.eval_every"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.finetune.eval_every = parse_count(k, v); };
            s["synth.num_classes"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.synth.num_classes = parse_count(k, v); };
            s["synth.clips_per_class"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.synth.clips_per_class = parse_count(k, v); };
            s["synth.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.synth.seed = parse_count(k, v); };
            s["synth.label_mode"] = [](RunConfig& c, const std::string& k, const std::string& v) {
                if (v == "single") c.synth.label_mode = LabelMode::single;
                else if (v == "multi") c.synth.label_mode = LabelMode::multi;
                else throw ConfigError(k + ": expected single or multi, got '" + v + "'");
            };
            return s;
        }();
        if (key.rfind("model.", 0) == 0) {
            const std::string field = key.substr(6);
            for (auto& [name, ptr] : model.fields()) {
                if (name == field) {
                    *ptr = parse_count(key, value);
                    if (field == "time_patches") grid_from_clip = false;
                    return;
                }
            }
            throw ConfigError("unknown config key '" + key + "'");
        }
        const auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
        it->second(*this, key, value);
    }

    static RunConfig from_kv(const KeyValues& kv) {
        RunConfig c;
        for (const auto& [k, v] : kv.items()) c.set(k, v);
        return c;
    }

    // Every setting as "section.key" text; from_kv(to_kv()) reproduces the config.
    KeyValues to_kv() const {
        KeyValues kv;
        kv.set("run.mode", mode_name(mode));
        kv.set("run.seed", std::to_string(seed));
        kv.set("run.out", out.string());
        kv.set("run.record_time", record_time ? "true" : "false");
        kv.set("data.manifest", manifest.string());
        kv.set("data.clip_seconds", exact_double(clip_seconds));
        if (mask_ratio) kv.set("mask.ratio", exact_double(*mask_ratio));
        if (lambda_cls) kv.set("loss.lambda_cls", exact_double(*lambda_cls));
        kv.set("loss.tau", exact_double(tau));
        if (!objectives.empty()) kv.set("loss.objectives", objectives);
        kv.set("optim.lr", exact_double(optim.lr));
        kv.set("optim.weight_decay", exact_double(optim.weight_decay));
        kv.set("optim.beta1", exact_double(optim.beta1));
        kv.set("optim.beta2", exact_double(optim.beta2));
        kv.set("optim.eps", exact_double(optim.eps));
        kv.set("optim.warmup_frac", exact_double(warmup_frac));
        kv.set("optim.batch_size", std::to_string(batch_size));
        kv.set("optim.steps", std::to_string(steps));
        kv.set("optim.checkpoint_every", std::to_string(checkpoint_every));
        kv.set("optim.eval_every", std::to_string(eval_every));
        kv.set("teacher.source", teacher_text());
        kv.set("teacher.seed", std::to_string(teacher_seed));
        kv.set("teacher.normalize", teacher_normalize ? "true" : "false");
        kv.set("finetune.steps", std::to_string(finetune.steps));
        kv.set("finetune.batch_size", std::to_string(finetune.batch_size));
        kv.set("finetune.lr", exact_double(finetune.lr));
        kv.set("finetune.time_ratio", exact_double(finetune.time_ratio));
        kv.set("finetune.freq_ratio", exact_double(finetune.freq_ratio));
        kv.set("finetune.eval_every", std::to_string(finetune.eval_every));
        kv.set("synth.num_classes", std::to_string(synth.num_classes));
        kv.set("synth.clips_per_class", std::to_string(synth.clips_per_class));
        kv.set("synth.seed", std::to_string(synth.seed));
        kv.set("synth.label_mode", synth.label_mode == LabelMode::multi ? "multi" : "single");
        for (const auto& [name, ptr] : model.fields()) {
            if (name == "time_patches" && grid_from_clip) continue;
            kv.set("model." + name, std::to_string(*ptr));
        }
        return kv;
    }

    // Sectioned text accepted by parse_config_text.
    std::string to_text() const {
        std::string out, section;
        const KeyValues kv = to_kv();
        for (const auto& [k, v] : kv.items()) {
            const std::string sec = k.substr(0, k.find('.'));
            if (sec != section) {
                out += (out.empty() ? "" : "\n") + ("[" + sec + "]\n");
                section = sec;
            }
            out += k.substr(k.find('.') + 1) + " = " + v + "\n";
        }
        return out;
    }
};

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return RunConfig::from_kv(parse_config_text(ss.str(), path.string()));
}

// Worker thread cap: MAMLAB_THREADS if set, else the hardware concurrency.
inline std::size_t worker_threads() {
    if (const char* env = std::getenv("MAMLAB_THREADS"); env && *env) {
        const std::size_t n = parse_count("MAMLAB_THREADS", env);
        if (n == 0) throw ConfigError("MAMLAB_THREADS must be at least 1");
        return n;
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

} // namespace mamlab

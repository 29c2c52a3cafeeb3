#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "mamlab/rng.hpp"
#include "mamlab/wav.hpp"

// Desk-scale stand-in for labelled audio corpora: each class owns a spectral signature
// (tone band, chirp, noise burst, amplitude-modulated tone) over a faint noise floor.

namespace mamlab {

enum class LabelMode { single, multi };

struct SynthDatasetSpec {
    std::size_t num_classes = 4;
    std::size_t clips_per_class = 50;
    double clip_seconds = 2.0;
    LabelMode label_mode = LabelMode::single;
    std::uint64_t seed = 0;
    int sample_rate = 16000;
};

enum class EventKind { tone, chirp, noise_burst, am_tone };

// Class c uses kind c mod 4; classes sharing a kind are separated by frequency band.
struct ClassSignature {
    EventKind kind;
    double low_hz;
    double high_hz;
};

inline ClassSignature class_signature(std::size_t c) {
    static constexpr EventKind kinds[] = {EventKind::tone, EventKind::chirp, EventKind::noise_burst, EventKind::am_tone};
    static constexpr double bands[][2] = {{300, 700}, {1000, 3500}, {4500, 6500}, {1800, 2400}};
    const std::size_t k = c % 4, octave = c / 4;
    const double shift = std::pow(1.25, static_cast<double>(octave));
    return {kinds[k], bands[k][0] * shift, std::min(bands[k][1] * shift, 7600.0)};
}

// Mixes one event with signature `sig` into `out` at a random onset.
inline void add_event(std::vector<double>& out, const ClassSignature& sig, int rate, Rng& rng) {
    const std::size_t n = out.size();
    const double two_pi = 2.0 * std::numbers::pi;
    const double amp = rng.uniform(0.15, 0.4);
    const std::size_t len = static_cast<std::size_t>(rng.uniform(0.5, 0.9) * static_cast<double>(n));
    const std::size_t start = rng.index(n - len + 1);
    auto envelope = [&](std::size_t i) {
        // 10 ms linear fade in and out
        const double ramp = 0.01 * rate;
        const double a = std::min(1.0, static_cast<double>(i) / ramp);
        const double b = std::min(1.0, static_cast<double>(len - 1 - i) / ramp);
        return std::min(a, b);
    };
    switch (sig.kind) {
    case EventKind::tone: {
        const double f = rng.uniform(sig.low_hz, sig.high_hz);
        const double phase = rng.uniform(0.0, two_pi);
        for (std::size_t i = 0; i < len; ++i) {
            const double t = static_cast<double>(i) / rate;
            out[start + i] += amp * envelope(i) * (std::sin(two_pi * f * t + phase) + 0.5 * std::sin(2.0 * two_pi * f * t + phase));
        }
        break;
    }
    case EventKind::chirp: {
        const bool up = rng.uniform() < 0.5;
        const double f0 = up ? sig.low_hz : sig.high_hz, f1 = up ? sig.high_hz : sig.low_hz;
        const double dur = static_cast<double>(len) / rate;
        double phase = rng.uniform(0.0, two_pi);
        for (std::size_t i = 0; i < len; ++i) {
            const double t = static_cast<double>(i) / rate;
            phase += two_pi * (f0 + (f1 - f0) * t / dur) / rate;
            out[start + i] += amp * envelope(i) * std::sin(phase);
        }
        break;
    }
    case EventKind::noise_burst: {
        // A bank of random-phase partials spread over the band, gated into short bursts.
        constexpr int partials = 24;
        std::vector<double> freqs(partials), phases(partials);
        for (int p = 0; p < partials; ++p) {
            freqs[p] = rng.uniform(sig.low_hz, sig.high_hz);
            phases[p] = rng.uniform(0.0, two_pi);
        }
        const double burst_hz = rng.uniform(3.0, 6.0);
        for (std::size_t i = 0; i < len; ++i) {
            const double t = static_cast<double>(i) / rate;
            if (std::fmod(t * burst_hz, 1.0) > 0.5) continue;
            double s = 0.0;
            for (int p = 0; p < partials; ++p) s += std::sin(two_pi * freqs[p] * t + phases[p]);
            out[start + i] += amp * envelope(i) * s / std::sqrt(static_cast<double>(partials));
        }
        break;
    }
    case EventKind::am_tone: {
        const double f = rng.uniform(sig.low_hz, sig.high_hz);
        const double rate_hz = rng.uniform(8.0, 14.0);
        const double phase = rng.uniform(0.0, two_pi);
        for (std::size_t i = 0; i < len; ++i) {
            const double t = static_cast<double>(i) / rate;
            const double mod = 0.5 * (1.0 + std::sin(two_pi * rate_hz * t));
            out[start + i] += amp * envelope(i) * mod * std::sin(two_pi * f * t + phase);
        }
        break;
    }
    }
}

struct SynthClip {
    Waveform wave;
    std::vector<std::size_t> labels;
};

// Clip `index` of the dataset; depends only on (spec.seed, index).
inline SynthClip synth_clip(const SynthDatasetSpec& spec, std::size_t index) {
    Rng rng(derive_seed(spec.seed, 0x5157, index));
    SynthClip clip;
    const std::size_t n = static_cast<std::size_t>(std::llround(spec.clip_seconds * spec.sample_rate));
    clip.wave.sample_rate = spec.sample_rate;
    clip.wave.samples.assign(n, 0.0);
    const std::size_t primary = index % spec.num_classes;
    clip.labels.push_back(primary);
    if (spec.label_mode == LabelMode::multi) {
        for (std::size_t c = 0; c < spec.num_classes; ++c) {
            if (c != primary && rng.uniform() < 0.3) clip.labels.push_back(c);
        }
        std::sort(clip.labels.begin(), clip.labels.end());
    }
    for (std::size_t c : clip.labels) add_event(clip.wave.samples, class_signature(c), spec.sample_rate, rng);
    for (double& x : clip.wave.samples) x = std::clamp(x + rng.normal(0.0, 0.005), -1.0, 1.0);
    return clip;
}

struct ManifestEntry {
    std::filesystem::path path;
    std::vector<std::size_t> labels;
};

// One line per clip: path, a tab, then comma-separated label indices.
inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write manifest " + path.string());
    for (const auto& e : entries) {
        f << e.path.generic_string() << '\t';
        for (std::size_t i = 0; i < e.labels.size(); ++i) f << (i ? "," : "") << e.labels[i];
        f << '\n';
    }
    if (!f) throw IoError("write failed for manifest " + path.string());
}

// Relative paths resolve against the manifest's directory.
inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest " + path.string());
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected <path>\\t<labels>");
        ManifestEntry e;
        e.path = line.substr(0, tab);
        if (e.path.is_relative()) e.path = path.parent_path() / e.path;
        std::string labels = line.substr(tab + 1);
        std::size_t pos = 0;
        while (pos <= labels.size()) {
            std::size_t comma = labels.find(',', pos);
            if (comma == std::string::npos) comma = labels.size();
            const std::string tok = labels.substr(pos, comma - pos);
            try {
                std::size_t used = 0;
                e.labels.push_back(static_cast<std::size_t>(std::stoull(tok, &used)));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw InputError(path.string() + ":" + std::to_string(lineno) + ": bad label '" + tok + "'");
            }
            pos = comma + 1;
        }
        out.push_back(std::move(e));
    }
    return out;
}

// Writes clip_XXXX.wav files and manifest.tsv into `dir`; returns the manifest path.
inline std::filesystem::path generate_synth_dataset(const SynthDatasetSpec& spec, const std::filesystem::path& dir) {
    if (spec.num_classes == 0 || spec.clips_per_class == 0 || !(spec.clip_seconds > 0.0)) {
        throw ConfigError("synth: need at least one class, one clip per class and a positive clip length");
    }
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    std::vector<ManifestEntry> entries;
    const std::size_t total = spec.num_classes * spec.clips_per_class;
    for (std::size_t i = 0; i < total; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "clip_%04zu.wav", i);
        const SynthClip clip = synth_clip(spec, i);
        write_wav(dir / name, clip.wave, WavEncoding::pcm16);
        entries.push_back({name, clip.labels});
    }
    const auto manifest = dir / "manifest.tsv";
    write_manifest(manifest, entries);
    return manifest;
}

} // namespace mamlab

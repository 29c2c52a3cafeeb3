#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "mamlab/errors.hpp"
#include "mamlab/wav.hpp"

namespace mamlab {

// Front-end constants: 16 kHz input, 25 ms Hann window, 10 ms hop, 512-point FFT,
// 128 HTK mel bands over 0-8 kHz.
namespace fbank {
inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kWindow = 400;
inline constexpr std::size_t kHop = 160;
inline constexpr std::size_t kFftSize = 512;
inline constexpr std::size_t kMels = 128;
inline constexpr double kLowHz = 0.0;
inline constexpr double kHighHz = 8000.0;
inline constexpr double kEnergyFloor = 1e-10;
inline const double kLogFloor = std::log(kEnergyFloor);
} // namespace fbank

// Time x mel grid of log filterbank energies, row-major (one row per frame).
struct MelSpectrogram {
    std::size_t frames = 0;
    std::size_t mels = fbank::kMels;
    std::vector<double> values;

    double at(std::size_t t, std::size_t m) const { return values[t * mels + m]; }
    double& at(std::size_t t, std::size_t m) { return values[t * mels + m]; }
};

struct FrameMatrix {
    std::size_t count = 0;
    std::size_t width = 0;
    std::vector<double> values; // count x width

    const double* frame(std::size_t i) const { return values.data() + i * width; }
};

// Periodic Hann: w[n] = 0.5 - 0.5 cos(2 pi n / N).
inline std::vector<double> hann_window(std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
    }
    return w;
}

// Windowed-sinc resampler (Hann-tapered, 16 zero crossings per side at the lower rate).
inline Waveform resample(const Waveform& wave, int target_rate) {
    if (wave.sample_rate <= 0 || target_rate <= 0) throw InputError("resample: sample rates must be positive");
    if (wave.sample_rate == target_rate) return wave;
    const double ratio = static_cast<double>(target_rate) / wave.sample_rate;
    const double cutoff = std::min(1.0, ratio); // fraction of the input Nyquist
    constexpr double kZeros = 16.0;
    const double half_width = kZeros / cutoff; // in input samples
    const auto out_len = static_cast<std::size_t>(std::floor(static_cast<double>(wave.samples.size()) * ratio));
    Waveform out;
    out.sample_rate = target_rate;
    out.samples.resize(out_len);
    const auto n_in = static_cast<long long>(wave.samples.size());
    for (std::size_t n = 0; n < out_len; ++n) {
        const double x = static_cast<double>(n) / ratio;
        const auto lo = std::max<long long>(0, static_cast<long long>(std::ceil(x - half_width)));
        const auto hi = std::min<long long>(n_in - 1, static_cast<long long>(std::floor(x + half_width)));
        double acc = 0.0;
        for (long long k = lo; k <= hi; ++k) {
            const double dist = x - static_cast<double>(k);
            const double arg = cutoff * dist;
            const double sinc = arg == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
            const double taper = 0.5 + 0.5 * std::cos(std::numbers::pi * dist / half_width);
            acc += wave.samples[static_cast<std::size_t>(k)] * cutoff * sinc * taper;
        }
        out.samples[n] = acc;
    }
    return out;
}

// Frame count = floor((len - window) / hop) + 1; each frame is multiplied by the periodic Hann window.
inline FrameMatrix frame_signal(const Waveform& wave, std::size_t window_samples = fbank::kWindow,
                                std::size_t hop_samples = fbank::kHop) {
    if (window_samples == 0 || hop_samples == 0) throw ParameterError("frame_signal: window and hop must be positive");
    if (wave.samples.size() < window_samples) {
        throw InputError("frame_signal: need at least " + std::to_string(window_samples) + " samples, got " +
                         std::to_string(wave.samples.size()));
    }
    FrameMatrix frames;
    frames.width = window_samples;
    frames.count = (wave.samples.size() - window_samples) / hop_samples + 1;
    frames.values.resize(frames.count * window_samples);
    const std::vector<double> window = hann_window(window_samples);
    for (std::size_t f = 0; f < frames.count; ++f) {
        for (std::size_t i = 0; i < window_samples; ++i) {
            frames.values[f * window_samples + i] = wave.samples[f * hop_samples + i] * window[i];
        }
    }
    return frames;
}

// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw ParameterError("fft: size must be a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
        for (std::size_t i = 0; i < n; i += len) {
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> w = std::polar(1.0, ang * static_cast<double>(k));
                const std::complex<double> u = a[i + k];
                const std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
            }
        }
    }
}

// |X[k]|^2 for k in [0, fft_size/2], zero-padding the frame to fft_size.
inline std::vector<double> power_spectrum(const double* frame, std::size_t width, std::size_t fft_size = fbank::kFftSize) {
    if (width > fft_size) throw DimensionError("power_spectrum: frame wider than FFT size");
    std::vector<std::complex<double>> buf(fft_size);
    for (std::size_t i = 0; i < width; ++i) buf[i] = frame[i];
    fft(buf);
    std::vector<double> out(fft_size / 2 + 1);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::norm(buf[k]);
    return out;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular HTK-scale filters (not area-normalized), interpolated on the mel axis.
class MelFilterbank {
public:
    MelFilterbank(std::size_t num_mels = fbank::kMels, std::size_t fft_size = fbank::kFftSize,
                  int sample_rate = fbank::kSampleRate, double low_hz = fbank::kLowHz, double high_hz = fbank::kHighHz)
        : num_mels_(num_mels), num_bins_(fft_size / 2 + 1), weights_(num_mels * (fft_size / 2 + 1), 0.0) {
        const double mel_lo = hz_to_mel(low_hz);
        const double mel_hi = hz_to_mel(high_hz);
        const double step = (mel_hi - mel_lo) / static_cast<double>(num_mels + 1);
        centers_hz_.resize(num_mels);
        for (std::size_t m = 0; m < num_mels; ++m) {
            const double left = mel_lo + step * static_cast<double>(m);
            const double center = left + step;
            const double right = center + step;
            centers_hz_[m] = mel_to_hz(center);
            for (std::size_t k = 0; k < num_bins_; ++k) {
                const double hz = static_cast<double>(k) * sample_rate / static_cast<double>(fft_size);
                const double mel = hz_to_mel(hz);
                double w = 0.0;
                if (mel > left && mel <= center) w = (mel - left) / (center - left);
                else if (mel > center && mel < right) w = (right - mel) / (right - center);
                weights_[m * num_bins_ + k] = w;
            }
        }
    }

    std::size_t num_mels() const { return num_mels_; }
    std::size_t num_bins() const { return num_bins_; }
    double weight(std::size_t mel, std::size_t bin) const { return weights_[mel * num_bins_ + bin]; }
    double center_hz(std::size_t mel) const { return centers_hz_[mel]; }

    std::vector<double> apply(const std::vector<double>& power) const {
        std::vector<double> out(num_mels_, 0.0);
        for (std::size_t m = 0; m < num_mels_; ++m) {
            const double* w = weights_.data() + m * num_bins_;
            double acc = 0.0;
            for (std::size_t k = 0; k < num_bins_; ++k) acc += w[k] * power[k];
            out[m] = acc;
        }
        return out;
    }

private:
    std::size_t num_mels_;
    std::size_t num_bins_;
    std::vector<double> weights_;
    std::vector<double> centers_hz_;
};

inline const MelFilterbank& default_filterbank() {
    static const MelFilterbank bank;
    return bank;
}

// Log mel energies per frame, floored at log(1e-10). Non-16 kHz input is resampled first.
inline MelSpectrogram log_mel_spectrogram(const Waveform& input) {
    const Waveform wave = input.sample_rate == fbank::kSampleRate ? input : resample(input, fbank::kSampleRate);
    const FrameMatrix frames = frame_signal(wave);
    const MelFilterbank& bank = default_filterbank();
    MelSpectrogram spec;
    spec.frames = frames.count;
    spec.mels = bank.num_mels();
    spec.values.resize(spec.frames * spec.mels);
    for (std::size_t f = 0; f < frames.count; ++f) {
        const std::vector<double> energies = bank.apply(power_spectrum(frames.frame(f), frames.width));
        for (std::size_t m = 0; m < spec.mels; ++m) {
            spec.at(f, m) = std::log(std::max(energies[m], fbank::kEnergyFloor));
        }
    }
    return spec;
}

// Pads with the floor value up to `target_frames`; longer inputs are truncated with a warning.
inline MelSpectrogram pad_to_grid(const MelSpectrogram& spec, std::size_t target_frames, std::size_t patch = 16) {
    if (target_frames == 0 || target_frames % patch != 0) {
        throw ParameterError("pad_to_grid: target frames " + std::to_string(target_frames) +
                             " is not a positive multiple of " + std::to_string(patch));
    }
    MelSpectrogram out;
    out.frames = target_frames;
    out.mels = spec.mels;
    out.values.assign(target_frames * spec.mels, fbank::kLogFloor);
    if (spec.frames > target_frames) {
        spdlog::warn("pad_to_grid: truncating {} frames to {}", spec.frames, target_frames);
    }
    const std::size_t keep = std::min(spec.frames, target_frames);
    std::copy_n(spec.values.begin(), keep * spec.mels, out.values.begin());
    return out;
}

// Padded frame count for clips of `seconds`: the 1024-frames-per-10-s target length scaled to
// the clip, rounded up to whole patches (10 s -> 1024, 2 s -> 208). Always covers the native frames.
inline std::size_t grid_frames_for_seconds(double seconds, std::size_t patch = 16) {
    const double scaled = std::ceil(seconds * 102.4 - 1e-9);
    const auto frames = static_cast<std::size_t>(std::max(1.0, scaled));
    return (frames + patch - 1) / patch * patch;
}

// WAV file -> padded log-mel grid.
inline MelSpectrogram load_features(const std::filesystem::path& path, std::size_t target_frames) {
    return pad_to_grid(log_mel_spectrogram(read_wav(path)), target_frames);
}

} // namespace mamlab

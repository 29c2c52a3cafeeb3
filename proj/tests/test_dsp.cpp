#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <memory>
#include <numbers>

#include <spdlog/sinks/ringbuffer_sink.h>
#include <spdlog/spdlog.h>

#include "mamlab/dsp.hpp"
#include "mamlab/rng.hpp"

namespace mamlab {
namespace {

Waveform tone(double hz, double seconds, double amplitude = 0.5, int rate = 16000) {
    Waveform w;
    w.sample_rate = rate;
    w.samples.resize(static_cast<std::size_t>(seconds * rate));
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
        w.samples[i] = amplitude * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / rate);
    }
    return w;
}

Waveform noise(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Waveform w;
    w.samples.resize(n);
    for (double& s : w.samples) s = rng.normal(0.0, 0.1);
    return w;
}

TEST(FrameSignal, TenSecondsGives998Frames) {
    Waveform w;
    w.samples.assign(160000, 0.0);
    const FrameMatrix f = frame_signal(w);
    EXPECT_EQ(f.count, 998u);
    EXPECT_EQ(f.width, 400u);
}

TEST(FrameSignal, GridFramesCoverNativeFrames) {
    EXPECT_EQ(grid_frames_for_seconds(10.0), 1024u);
    EXPECT_EQ(grid_frames_for_seconds(2.0), 208u);
    for (double sec = 0.05; sec < 12.0; sec += 0.37) {
        Waveform w;
        w.samples.assign(static_cast<std::size_t>(std::llround(sec * 16000)), 0.0);
        const std::size_t grid = grid_frames_for_seconds(sec);
        EXPECT_EQ(grid % 16, 0u);
        EXPECT_GE(grid, frame_signal(w).count) << sec;
    }
}

TEST(FrameSignal, ExactlyOneWindow) {
    Waveform w;
    w.samples.assign(400, 0.0);
    EXPECT_EQ(frame_signal(w).count, 1u);
}

TEST(FrameSignal, ConstantOneFrameIsTheHannWindow) {
    Waveform w;
    w.samples.assign(400, 1.0);
    const FrameMatrix f = frame_signal(w);
    for (std::size_t i = 0; i < 400; ++i) {
        EXPECT_DOUBLE_EQ(f.values[i], 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / 400.0));
    }
    EXPECT_DOUBLE_EQ(f.values[0], 0.0);
    EXPECT_DOUBLE_EQ(f.values[200], 1.0);
}

TEST(FrameSignal, TooShortInputStatesMinimum) {
    Waveform w;
    w.samples.assign(399, 0.0);
    try {
        frame_signal(w);
        FAIL();
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("400"), std::string::npos);
    }
}

TEST(Fft, MatchesDirectDft) {
    Rng rng(3);
    std::vector<std::complex<double>> x(16);
    for (auto& v : x) v = {rng.normal(), rng.normal()};
    std::vector<std::complex<double>> y = x;
    fft(y);
    for (std::size_t k = 0; k < 16; ++k) {
        std::complex<double> acc = 0.0;
        for (std::size_t n = 0; n < 16; ++n) acc += x[n] * std::polar(1.0, -2.0 * std::numbers::pi * k * n / 16.0);
        EXPECT_NEAR(std::abs(acc - y[k]), 0.0, 1e-12);
    }
}

TEST(LogMel, SilenceIsFloor) {
    Waveform w;
    w.samples.assign(16000, 0.0);
    const MelSpectrogram s = log_mel_spectrogram(w);
    EXPECT_EQ(s.mels, 128u);
    for (double v : s.values) EXPECT_EQ(v, std::log(1e-10));
}

TEST(LogMel, TenSecondClipShape) {
    const MelSpectrogram s = log_mel_spectrogram(noise(160000, 1));
    EXPECT_EQ(s.frames, 998u);
    EXPECT_EQ(s.mels, 128u);
}

// The band a 1 kHz tone lands in, derived straight from the HTK triangle definition: 1 kHz is
// FFT bin 32 exactly, so the winning band is the triangle with the largest weight at 1 kHz.
TEST(LogMel, PureToneArgmaxBandIsStable) {
    const double mel_hi = 2595.0 * std::log10(1.0 + 8000.0 / 700.0);
    const double step = mel_hi / 129.0;
    const double tone_mel = 2595.0 * std::log10(1.0 + 1000.0 / 700.0);
    std::size_t expected = 0;
    double best = -1.0;
    for (std::size_t m = 0; m < 128; ++m) {
        const double left = step * m, center = left + step, right = center + step;
        const double w = tone_mel <= left || tone_mel >= right ? 0.0
                         : tone_mel <= center                  ? (tone_mel - left) / step
                                                               : (right - tone_mel) / step;
        if (w > best) {
            best = w;
            expected = m;
        }
    }

    const MelSpectrogram s = log_mel_spectrogram(tone(1000.0, 1.0));
    for (std::size_t t = 2; t + 2 < s.frames; ++t) {
        std::size_t arg = 0;
        for (std::size_t m = 1; m < s.mels; ++m) {
            if (s.at(t, m) > s.at(t, arg)) arg = m;
        }
        EXPECT_EQ(arg, expected) << "frame " << t;
    }
}

TEST(LogMel, AmplitudeScalingShiftsByTwoLogC) {
    const Waveform base = noise(16000, 5);
    for (double c : {0.25, 3.0}) {
        Waveform scaled = base;
        for (double& v : scaled.samples) v *= c;
        const MelSpectrogram a = log_mel_spectrogram(base);
        const MelSpectrogram b = log_mel_spectrogram(scaled);
        std::size_t checked = 0;
        for (std::size_t i = 0; i < a.values.size(); ++i) {
            if (a.values[i] > fbank::kLogFloor + 1.0 && b.values[i] > fbank::kLogFloor + 1.0) {
                EXPECT_NEAR(b.values[i] - a.values[i], 2.0 * std::log(c), 1e-9);
                ++checked;
            }
        }
        EXPECT_GT(checked, a.values.size() / 2);
    }
}

TEST(Filterbank, NonnegativeAndCoversInteriorBins) {
    const MelFilterbank& bank = default_filterbank();
    const double first = bank.center_hz(0), last = bank.center_hz(127);
    for (std::size_t k = 0; k < bank.num_bins(); ++k) {
        double total = 0.0;
        for (std::size_t m = 0; m < bank.num_mels(); ++m) {
            EXPECT_GE(bank.weight(m, k), 0.0);
            total += bank.weight(m, k);
        }
        const double hz = k * 16000.0 / 512.0;
        if (hz >= first && hz <= last) EXPECT_GT(total, 0.0) << "bin " << k;
    }
}

TEST(PadToGrid, PadsWithFloor) {
    const MelSpectrogram s = log_mel_spectrogram(noise(160000, 2));
    const MelSpectrogram p = pad_to_grid(s, 1024);
    EXPECT_EQ(p.frames, 1024u);
    for (std::size_t t = 0; t < 998; ++t) {
        for (std::size_t m = 0; m < 128; ++m) ASSERT_EQ(p.at(t, m), s.at(t, m));
    }
    for (std::size_t t = 998; t < 1024; ++t) {
        for (std::size_t m = 0; m < 128; ++m) ASSERT_EQ(p.at(t, m), std::log(1e-10));
    }
}

TEST(PadToGrid, ExactSizeIsIdentity) {
    MelSpectrogram s;
    s.frames = 1024;
    s.values.assign(1024 * 128, 0.0);
    for (std::size_t i = 0; i < s.values.size(); ++i) s.values[i] = std::sin(static_cast<double>(i));
    EXPECT_EQ(pad_to_grid(s, 1024).values, s.values);
}

TEST(PadToGrid, LongerInputIsTruncatedWithWarning) {
    auto sink = std::make_shared<spdlog::sinks::ringbuffer_sink_mt>(8);
    auto previous = spdlog::default_logger();
    spdlog::set_default_logger(std::make_shared<spdlog::logger>("capture", sink));
    MelSpectrogram s;
    s.frames = 1030;
    s.values.assign(1030 * 128, 1.5);
    const MelSpectrogram p = pad_to_grid(s, 1024);
    spdlog::set_default_logger(previous);
    EXPECT_EQ(p.frames, 1024u);
    const auto messages = sink->last_formatted();
    ASSERT_EQ(messages.size(), 1u);
    EXPECT_NE(messages[0].find("truncating 1030 frames to 1024"), std::string::npos);
}

TEST(PadToGrid, TargetMustBeGridMultiple) {
    MelSpectrogram s;
    s.frames = 10;
    s.values.assign(10 * 128, 0.0);
    EXPECT_THROW(pad_to_grid(s, 1000), ParameterError);
}

TEST(Pipeline, TenSecondClipIs1024By128) {
    const MelSpectrogram p = pad_to_grid(log_mel_spectrogram(noise(160000, 9)), 1024);
    EXPECT_EQ(p.frames, 1024u);
    EXPECT_EQ(p.mels, 128u);
    EXPECT_EQ(p.values.size(), 1024u * 128u);
}

TEST(Wav, Pcm16AndFloatRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "mamlab_wav_test";
    std::filesystem::create_directories(dir);
    const Waveform w = tone(440.0, 0.1, 0.3);
    write_wav(dir / "f.wav", w, WavEncoding::float32);
    const Waveform f = read_wav(dir / "f.wav");
    ASSERT_EQ(f.samples.size(), w.samples.size());
    for (std::size_t i = 0; i < w.samples.size(); ++i) EXPECT_EQ(f.samples[i], static_cast<double>(static_cast<float>(w.samples[i])));
    write_wav(dir / "p.wav", w, WavEncoding::pcm16);
    const Waveform p = read_wav(dir / "p.wav");
    for (std::size_t i = 0; i < w.samples.size(); ++i) EXPECT_NEAR(p.samples[i], w.samples[i], 1.0 / 32768.0);
    EXPECT_EQ(p.sample_rate, 16000);
    std::filesystem::remove_all(dir);
}

TEST(Wav, MissingFileIsIoError) {
    EXPECT_THROW(read_wav("/nonexistent/clip.wav"), IoError);
}

TEST(Resample, ToneFrequencySurvivesDownsampling) {
    const Waveform hi = tone(1000.0, 0.5, 0.5, 32000);
    const Waveform lo = resample(hi, 16000);
    EXPECT_EQ(lo.sample_rate, 16000);
    EXPECT_EQ(lo.samples.size(), 8000u);
    // Away from the edges the output matches the ideal 16 kHz tone.
    const Waveform ideal = tone(1000.0, 0.5, 0.5, 16000);
    double worst = 0.0;
    for (std::size_t i = 200; i + 200 < lo.samples.size(); ++i) worst = std::max(worst, std::abs(lo.samples[i] - ideal.samples[i]));
    EXPECT_LT(worst, 1e-2);
}

TEST(Resample, ToneAboveNewNyquistIsRemoved) {
    const Waveform lo = resample(tone(12000.0, 0.5, 0.5, 32000), 16000);
    double rms = 0.0;
    for (std::size_t i = 200; i + 200 < lo.samples.size(); ++i) rms += lo.samples[i] * lo.samples[i];
    rms = std::sqrt(rms / (lo.samples.size() - 400));
    EXPECT_LT(rms, 0.02);
}

} // namespace
} // namespace mamlab

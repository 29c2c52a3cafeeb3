#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mamlab/errors.hpp"

namespace mamlab {

struct Waveform {
    std::vector<double> samples;
    int sample_rate = 16000;
};

namespace detail {

inline std::uint32_t read_le32(const unsigned char* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

inline std::uint16_t read_le16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }

inline void put_le32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_le16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}

} // namespace detail

// Mono RIFF/WAVE, 16-bit PCM or 32-bit IEEE float. Samples are scaled to [-1, 1).
inline Waveform read_wav(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw InputError(path.string() + ": not a RIFF/WAVE file");
    }
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    const unsigned char* data = nullptr;
    std::size_t data_len = 0;
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const unsigned char* chunk = bytes.data() + pos;
        const std::uint32_t len = detail::read_le32(chunk + 4);
        if (pos + 8 + len > bytes.size()) throw InputError(path.string() + ": truncated chunk");
        if (std::memcmp(chunk, "fmt ", 4) == 0 && len >= 16) {
            format = detail::read_le16(chunk + 8);
            channels = detail::read_le16(chunk + 10);
            rate = detail::read_le32(chunk + 12);
            bits = detail::read_le16(chunk + 22);
            if (format == 0xFFFE && len >= 40) format = detail::read_le16(chunk + 32); // extensible
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            data = chunk + 8;
            data_len = len;
        }
        pos += 8 + len + (len & 1);
    }
    if (!data || rate == 0) throw InputError(path.string() + ": missing fmt or data chunk");
    if (channels != 1) throw InputError(path.string() + ": expected mono audio, found " + std::to_string(channels) + " channels");

    Waveform wave;
    wave.sample_rate = static_cast<int>(rate);
    if (format == 1 && bits == 16) {
        wave.samples.resize(data_len / 2);
        for (std::size_t i = 0; i < wave.samples.size(); ++i) {
            const auto v = static_cast<std::int16_t>(detail::read_le16(data + 2 * i));
            wave.samples[i] = static_cast<double>(v) / 32768.0;
        }
    } else if (format == 3 && bits == 32) {
        wave.samples.resize(data_len / 4);
        for (std::size_t i = 0; i < wave.samples.size(); ++i) {
            wave.samples[i] = static_cast<double>(std::bit_cast<float>(detail::read_le32(data + 4 * i)));
        }
    } else {
        throw InputError(path.string() + ": unsupported sample format (format " + std::to_string(format) + ", " +
                         std::to_string(bits) + " bits)");
    }
    for (double s : wave.samples) {
        if (!std::isfinite(s)) throw InputError(path.string() + ": non-finite sample");
    }
    return wave;
}

enum class WavEncoding { pcm16, float32 };

inline void write_wav(const std::filesystem::path& path, const Waveform& wave, WavEncoding enc = WavEncoding::pcm16) {
    const std::uint16_t bits = enc == WavEncoding::pcm16 ? 16 : 32;
    const std::uint32_t bytes_per_sample = bits / 8;
    const auto data_len = static_cast<std::uint32_t>(wave.samples.size() * bytes_per_sample);
    std::string out;
    out.reserve(44 + data_len);
    out += "RIFF";
    detail::put_le32(out, 36 + data_len);
    out += "WAVEfmt ";
    detail::put_le32(out, 16);
    detail::put_le16(out, enc == WavEncoding::pcm16 ? 1 : 3);
    detail::put_le16(out, 1);
    detail::put_le32(out, static_cast<std::uint32_t>(wave.sample_rate));
    detail::put_le32(out, static_cast<std::uint32_t>(wave.sample_rate) * bytes_per_sample);
    detail::put_le16(out, static_cast<std::uint16_t>(bytes_per_sample));
    detail::put_le16(out, bits);
    out += "data";
    detail::put_le32(out, data_len);
    for (double s : wave.samples) {
        if (enc == WavEncoding::pcm16) {
            const double scaled = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
            detail::put_le16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled)));
        } else {
            detail::put_le32(out, std::bit_cast<std::uint32_t>(static_cast<float>(s)));
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed for " + path.string());
}

} // namespace mamlab

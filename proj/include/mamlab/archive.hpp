#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mamlab/errors.hpp"
#include "mamlab/tensor.hpp"

// Versioned binary container used for checkpoints and precomputed target maps.
//
//   char[8]  magic "MAMLABv\0"
//   u32      format version (1)
//   u32      header length in bytes, then the header: "key=value\n" lines
//   u32      block count
//   per block:
//     u32 name length, name bytes
//     u32 rank, u64 extents[rank]
//     f64 values[product(extents)]
//
// All integers and floats are little-endian.

namespace mamlab {

inline constexpr char kArchiveMagic[8] = {'M', 'A', 'M', 'L', 'A', 'B', 'v', '\0'};
inline constexpr std::uint32_t kArchiveVersion = 1;

struct ArchiveBlock {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

class KeyValues {
public:
    void set(const std::string& key, const std::string& value) {
        for (auto& [k, v] : items_) {
            if (k == key) {
                v = value;
                return;
            }
        }
        items_.emplace_back(key, value);
    }

    const std::string* find(const std::string& key) const {
        for (const auto& [k, v] : items_) {
            if (k == key) return &v;
        }
        return nullptr;
    }

    const std::string& get(const std::string& key) const {
        if (const std::string* v = find(key)) return *v;
        throw FormatError("missing header key '" + key + "'");
    }

    const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }

    std::string to_text() const {
        std::string out;
        for (const auto& [k, v] : items_) out += k + "=" + v + "\n";
        return out;
    }

    static KeyValues from_text(const std::string& text) {
        KeyValues kv;
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t end = text.find('\n', pos);
            if (end == std::string::npos) end = text.size();
            const std::string line = text.substr(pos, end - pos);
            pos = end + 1;
            if (line.empty()) continue;
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos) throw FormatError("malformed header line '" + line + "'");
            kv.set(line.substr(0, eq), line.substr(eq + 1));
        }
        return kv;
    }

    friend bool operator==(const KeyValues&, const KeyValues&) = default;

private:
    std::vector<std::pair<std::string, std::string>> items_;
};

struct Archive {
    KeyValues header;
    std::vector<ArchiveBlock> blocks;

    const ArchiveBlock* find(const std::string& name) const {
        for (const auto& b : blocks) {
            if (b.name == name) return &b;
        }
        return nullptr;
    }
};

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    ByteReader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

    template <class T>
    T take() {
        using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
        need(sizeof(U));
        U bits = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) bits |= U(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return std::bit_cast<T>(bits);
    }

    std::string take_string(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool at_end() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw FormatError(source_ + ": truncated (needed " + std::to_string(n) + " more bytes at offset " +
                              std::to_string(pos_) + ", file has " + std::to_string(bytes_.size()) + ")");
        }
    }

    const std::string& bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string encode_archive(const Archive& archive) {
    std::string out(kArchiveMagic, sizeof(kArchiveMagic));
    detail::put_le<std::uint32_t>(out, kArchiveVersion);
    const std::string header = archive.header.to_text();
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(archive.blocks.size()));
    for (const ArchiveBlock& b : archive.blocks) {
        if (shape_numel(b.shape) != b.values.size()) {
            throw ContractError("archive block '" + b.name + "': shape " + shape_str(b.shape) + " does not match " +
                                std::to_string(b.values.size()) + " values");
        }
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(b.name.size()));
        out += b.name;
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(b.shape.size()));
        for (std::size_t e : b.shape) detail::put_le<std::uint64_t>(out, e);
        for (double v : b.values) detail::put_le<double>(out, v);
    }
    return out;
}

inline Archive decode_archive(const std::string& bytes, const std::string& source = "archive") {
    detail::ByteReader in(bytes, source);
    if (in.take_string(sizeof(kArchiveMagic)) != std::string(kArchiveMagic, sizeof(kArchiveMagic))) {
        throw FormatError(source + ": bad magic");
    }
    const auto version = in.take<std::uint32_t>();
    if (version != kArchiveVersion) {
        throw FormatError(source + ": format version " + std::to_string(version) + ", expected " +
                          std::to_string(kArchiveVersion));
    }
    Archive archive;
    archive.header = KeyValues::from_text(in.take_string(in.take<std::uint32_t>()));
    const auto count = in.take<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        ArchiveBlock b;
        b.name = in.take_string(in.take<std::uint32_t>());
        const auto rank = in.take<std::uint32_t>();
        if (rank > 8) throw FormatError(source + ": block '" + b.name + "' has implausible rank " + std::to_string(rank));
        for (std::uint32_t r = 0; r < rank; ++r) b.shape.push_back(static_cast<std::size_t>(in.take<std::uint64_t>()));
        const std::size_t n = shape_numel(b.shape);
        b.values.resize(n);
        for (std::size_t k = 0; k < n; ++k) b.values[k] = in.take<double>();
        archive.blocks.push_back(std::move(b));
    }
    if (!in.at_end()) throw FormatError(source + ": trailing bytes after last block");
    return archive;
}

inline void write_archive(const std::filesystem::path& path, const Archive& archive) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string bytes = encode_archive(archive);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("cannot write " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw IoError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Archive read_archive(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_archive(bytes, path.string());
}

} // namespace mamlab

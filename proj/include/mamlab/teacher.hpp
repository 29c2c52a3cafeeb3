#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mamlab/archive.hpp"
#include "mamlab/layers.hpp"
#include "mamlab/patching.hpp"

namespace mamlab {

enum class TeacherKind { frozen_random, precomputed_file };

struct TeacherSpec {
    TeacherKind kind = TeacherKind::frozen_random;
    std::size_t feature_dim = 32;
    std::uint64_t seed = 0;
    bool normalize = true;
    // frozen_random network shape
    std::size_t hidden = 64;
    std::size_t heads = 4;
    std::size_t layers = 2;
    // precomputed_file: a single target file, or a directory holding <clip stem>.targets per clip
    std::filesystem::path path;
};

inline void check_teacher_dim(const TeacherSpec& ts, std::size_t head_out_dim) {
    if (ts.feature_dim != head_out_dim) {
        throw ConfigError("teacher feature dim " + std::to_string(ts.feature_dim) + " does not match model head dim " +
                          std::to_string(head_out_dim));
    }
}

// Scales every row to unit Euclidean norm.
inline Tensor normalize_rows(const Tensor& t) {
    std::vector<double> v = t.values();
    const std::size_t d = t.dim(1);
    for (std::size_t r = 0; r < t.dim(0); ++r) {
        double ss = 0.0;
        for (std::size_t c = 0; c < d; ++c) ss += v[r * d + c] * v[r * d + c];
        const double norm = std::sqrt(ss);
        if (!(norm > 0.0) || !std::isfinite(norm)) throw NumericError("teacher: row " + std::to_string(r) + " has norm " + std::to_string(norm));
        for (std::size_t c = 0; c < d; ++c) v[r * d + c] /= norm;
    }
    return Tensor::matrix(t.dim(0), d, std::move(v));
}

// Stand-in for the audio teacher: a small randomly initialised transformer that is frozen at
// construction. It always sees the full patch sequence, so its output never depends on a mask.
class FrozenRandomTeacher {
public:
    FrozenRandomTeacher(const TeacherSpec& ts, const PatchGrid& grid) : spec_(ts), grid_(grid) {
        if (ts.feature_dim == 0 || ts.hidden == 0 || ts.heads == 0 || ts.hidden % ts.heads != 0 || ts.hidden % 4 != 0) {
            throw ConfigError("teacher: hidden width must be a positive multiple of 4 and of the head count");
        }
        Rng rng(derive_seed(ts.seed, 0x7e4c, 0));
        const double hidden_std = 1.0 / std::sqrt(static_cast<double>(ts.hidden));
        embed_ = Linear(params_, "teacher.embed", grid.patch_dim(), ts.hidden, rng,
                        1.0 / std::sqrt(static_cast<double>(grid.patch_dim())));
        for (std::size_t i = 0; i < ts.layers; ++i) {
            blocks_.emplace_back(params_, "teacher.blocks." + std::to_string(i), ts.hidden, ts.heads, 4, rng, hidden_std);
        }
        norm_ = LayerNorm(params_, "teacher.norm", ts.hidden);
        out_ = Linear(params_, "teacher.out", ts.hidden, ts.feature_dim, rng, hidden_std);
        positions_ = sincos_position_table(grid, ts.hidden);
        for (auto& p : params_.items()) p.tensor.set_requires_grad(false);
    }

    // One d-vector per patch of the full sequence.
    Tensor targets(const PatchSequence& seq) const {
        if (!(seq.grid == grid_)) throw DimensionError("teacher: patch grid differs from the one it was built for");
        NoGradGuard no_grad;
        Tensor x = add(embed_(seq.features), positions_);
        for (const auto& block : blocks_) x = block(x);
        Tensor t = out_(norm_(x));
        return spec_.normalize ? normalize_rows(t) : t.detach();
    }

    Tensor targets(const MelSpectrogram& spec) const { return targets(patchify(spec, grid_.patch)); }

    const ParameterSet& params() const { return params_; }
    const TeacherSpec& spec() const { return spec_; }

private:
    TeacherSpec spec_;
    PatchGrid grid_;
    ParameterSet params_;
    Linear embed_;
    std::vector<TransformerBlock> blocks_;
    LayerNorm norm_;
    Linear out_;
    Tensor positions_;
};

inline Tensor teacher_targets(const MelSpectrogram& spec, const TeacherSpec& ts) {
    const PatchSequence seq = patchify(spec);
    return FrozenRandomTeacher(ts, seq.grid).targets(seq);
}

// Target file: the archive container with header keys N and d and a single block "T" (N x d).
inline void save_precomputed_targets(const std::filesystem::path& path, const Tensor& targets) {
    if (targets.rank() != 2) throw ContractError("save_precomputed_targets: targets must be N x d");
    Archive a;
    a.header.set("kind", "targets");
    a.header.set("N", std::to_string(targets.dim(0)));
    a.header.set("d", std::to_string(targets.dim(1)));
    a.blocks.push_back({"T", targets.shape(), targets.values()});
    write_archive(path, a);
}

inline Tensor load_precomputed_targets(const std::filesystem::path& path, std::size_t expected_n, std::size_t expected_d) {
    const Archive a = read_archive(path);
    auto header_count = [&](const char* key) -> std::size_t {
        const std::string& s = a.header.get(key);
        try {
            return static_cast<std::size_t>(std::stoull(s));
        } catch (const std::exception&) {
            throw FormatError(path.string() + ": header " + key + "=" + s + " is not a count");
        }
    };
    const std::size_t n = header_count("N"), d = header_count("d");
    if (n != expected_n || d != expected_d) {
        throw FormatError(path.string() + ": expected " + std::to_string(expected_n) + "x" + std::to_string(expected_d) +
                          " targets, found " + std::to_string(n) + "x" + std::to_string(d));
    }
    const ArchiveBlock* t = a.find("T");
    if (!t) throw FormatError(path.string() + ": missing block 'T'");
    if (t->shape != Shape{n, d}) {
        throw FormatError(path.string() + ": block 'T' has shape " + shape_str(t->shape) + ", expected " +
                          shape_str(Shape{n, d}));
    }
    for (double x : t->values) {
        if (!std::isfinite(x)) throw FormatError(path.string() + ": non-finite target value");
    }
    return Tensor::matrix(n, d, t->values);
}

// Resolves the precomputed target file for a clip: the path itself if it is a file, else
// <path>/<clip stem>.targets.
inline std::filesystem::path precomputed_target_path(const TeacherSpec& ts, const std::filesystem::path& clip) {
    if (std::filesystem::is_directory(ts.path)) return ts.path / (clip.stem().string() + ".targets");
    return ts.path;
}

} // namespace mamlab

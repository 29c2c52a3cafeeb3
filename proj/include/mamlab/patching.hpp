#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mamlab/dsp.hpp"
#include "mamlab/ops.hpp"
#include "mamlab/rng.hpp"

namespace mamlab {

inline constexpr std::size_t kPatchSize = 16;

struct PatchGrid {
    std::size_t time_patches = 64;
    std::size_t freq_patches = 8;
    std::size_t patch = kPatchSize;

    std::size_t size() const { return time_patches * freq_patches; }
    std::size_t patch_dim() const { return patch * patch; }
    std::size_t index(std::size_t t, std::size_t f) const { return t * freq_patches + f; }
    std::size_t time_of(std::size_t i) const { return i / freq_patches; }
    std::size_t freq_of(std::size_t i) const { return i % freq_patches; }

    static PatchGrid for_spectrogram(std::size_t frames, std::size_t mels, std::size_t patch = kPatchSize) {
        if (frames == 0 || mels == 0 || frames % patch != 0 || mels % patch != 0) {
            throw DimensionError("spectrogram " + std::to_string(frames) + "x" + std::to_string(mels) +
                                 " does not tile into " + std::to_string(patch) + "x" + std::to_string(patch) + " patches");
        }
        return {frames / patch, mels / patch, patch};
    }

    friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

struct PatchCoord {
    std::size_t time = 0;
    std::size_t freq = 0;
};

struct PatchSequence {
    PatchGrid grid;
    Tensor features; // N x patch_dim, time-major patch order
    std::vector<PatchCoord> coords;
};

// Time-major raster order over the grid; each row is the raster flatten of one patch
// (patch-row = frame offset, patch-column = mel offset).
inline PatchSequence patchify(const MelSpectrogram& spec, std::size_t patch = kPatchSize) {
    const PatchGrid grid = PatchGrid::for_spectrogram(spec.frames, spec.mels, patch);
    const std::size_t n = grid.size(), pd = grid.patch_dim();
    std::vector<double> feats(n * pd);
    std::vector<PatchCoord> coords(n);
    for (std::size_t t = 0; t < grid.time_patches; ++t) {
        for (std::size_t f = 0; f < grid.freq_patches; ++f) {
            const std::size_t i = grid.index(t, f);
            coords[i] = {t, f};
            for (std::size_t dt = 0; dt < patch; ++dt) {
                for (std::size_t df = 0; df < patch; ++df) {
                    feats[i * pd + dt * patch + df] = spec.at(t * patch + dt, f * patch + df);
                }
            }
        }
    }
    return {grid, Tensor::matrix(n, pd, std::move(feats)), std::move(coords)};
}

inline MelSpectrogram unpatchify(const PatchSequence& seq) {
    const PatchGrid& grid = seq.grid;
    const std::size_t patch = grid.patch, pd = grid.patch_dim();
    if (seq.features.rank() != 2 || seq.features.dim(0) != grid.size() || seq.features.dim(1) != pd) {
        throw DimensionError("unpatchify: features " + shape_str(seq.features.shape()) + " do not match the grid");
    }
    MelSpectrogram spec;
    spec.frames = grid.time_patches * patch;
    spec.mels = grid.freq_patches * patch;
    spec.values.resize(spec.frames * spec.mels);
    const auto data = seq.features.data();
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const std::size_t t = grid.time_of(i), f = grid.freq_of(i);
        for (std::size_t dt = 0; dt < patch; ++dt) {
            for (std::size_t df = 0; df < patch; ++df) spec.at(t * patch + dt, f * patch + df) = data[i * pd + dt * patch + df];
        }
    }
    return spec;
}

// Partition of patch indices [0, N) into visible and masked sets, both sorted ascending.
struct MaskPlan {
    std::size_t total = 0;
    std::vector<std::size_t> visible;
    std::vector<std::size_t> masked;

    double gamma() const { return total == 0 ? 0.0 : static_cast<double>(masked.size()) / static_cast<double>(total); }

    static MaskPlan from_masked(std::size_t total, std::vector<std::size_t> masked) {
        std::sort(masked.begin(), masked.end());
        masked.erase(std::unique(masked.begin(), masked.end()), masked.end());
        if (!masked.empty() && masked.back() >= total) {
            throw ContractError("mask plan: index " + std::to_string(masked.back()) + " outside [0, " + std::to_string(total) + ")");
        }
        MaskPlan plan;
        plan.total = total;
        plan.masked = std::move(masked);
        plan.visible.reserve(total - plan.masked.size());
        std::size_t j = 0;
        for (std::size_t i = 0; i < total; ++i) {
            if (j < plan.masked.size() && plan.masked[j] == i) ++j;
            else plan.visible.push_back(i);
        }
        return plan;
    }

    static MaskPlan none(std::size_t total) { return from_masked(total, {}); }

    friend bool operator==(const MaskPlan&, const MaskPlan&) = default;
};

// floor(ratio * count), tolerant of products that land a hair below an integer.
inline std::size_t mask_count(double ratio, std::size_t count) {
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(count) + 1e-9));
}

inline void check_ratio(double ratio, const char* what) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        throw ParameterError(std::string(what) + " must lie in [0, 1), got " + std::to_string(ratio));
    }
}

// floor(gamma * N) indices masked uniformly without replacement.
inline MaskPlan sample_unstructured_mask(std::size_t total, double gamma, std::uint64_t seed) {
    check_ratio(gamma, "mask ratio");
    Rng rng(seed);
    return MaskPlan::from_masked(total, rng.sample_without_replacement(total, mask_count(gamma, total)));
}

// Masks floor(time_ratio * T) whole time columns and floor(freq_ratio * F) whole frequency rows
// of the patch grid; the masked set is their union.
inline MaskPlan sample_structured_mask(const PatchGrid& grid, double time_ratio, double freq_ratio, std::uint64_t seed) {
    check_ratio(time_ratio, "time mask ratio");
    check_ratio(freq_ratio, "frequency mask ratio");
    Rng rng(seed);
    const auto times = rng.sample_without_replacement(grid.time_patches, mask_count(time_ratio, grid.time_patches));
    const auto freqs = rng.sample_without_replacement(grid.freq_patches, mask_count(freq_ratio, grid.freq_patches));
    std::vector<std::size_t> masked;
    for (std::size_t t : times) {
        for (std::size_t f = 0; f < grid.freq_patches; ++f) masked.push_back(grid.index(t, f));
    }
    for (std::size_t f : freqs) {
        for (std::size_t t = 0; t < grid.time_patches; ++t) masked.push_back(grid.index(t, f));
    }
    return MaskPlan::from_masked(grid.size(), std::move(masked));
}

struct Partitioned {
    Tensor visible; // rows in plan.visible order
    Tensor masked;  // rows in plan.masked order
};

inline void check_plan_rows(const Tensor& t, const MaskPlan& plan, const char* op) {
    if (t.rank() != 2 || t.dim(0) != plan.total) {
        throw ContractError(std::string(op) + ": tensor " + shape_str(t.shape()) + " does not have the plan's " +
                            std::to_string(plan.total) + " rows");
    }
}

inline Partitioned partition(const PatchSequence& seq, const MaskPlan& plan) {
    check_plan_rows(seq.features, plan, "partition");
    return {gather_rows(seq.features, plan.visible), gather_rows(seq.features, plan.masked)};
}

// Splits a per-patch target map into (T_v, T_m) with the same index semantics as partition.
inline Partitioned split_targets(const Tensor& targets, const MaskPlan& plan) {
    check_plan_rows(targets, plan, "split_targets");
    return {gather_rows(targets, plan.visible), gather_rows(targets, plan.masked)};
}

// Inverse of partition: writes visible rows to plan.visible and masked rows to plan.masked.
inline Tensor scatter_back(const Tensor& visible, const Tensor& masked, const MaskPlan& plan) {
    if (visible.rank() != 2 || masked.rank() != 2 || visible.dim(0) != plan.visible.size() ||
        masked.dim(0) != plan.masked.size() || visible.dim(1) != masked.dim(1)) {
        throw ContractError("scatter_back: parts " + shape_str(visible.shape()) + " / " + shape_str(masked.shape()) +
                            " do not match the plan");
    }
    std::vector<std::size_t> order(plan.total);
    for (std::size_t r = 0; r < plan.visible.size(); ++r) order[plan.visible[r]] = r;
    for (std::size_t r = 0; r < plan.masked.size(); ++r) order[plan.masked[r]] = plan.visible.size() + r;
    return gather_rows(concat_rows({visible, masked}), order);
}

// Copy of the sequence with masked patch rows set to zero; sequence length is unchanged.
inline PatchSequence zero_masked(const PatchSequence& seq, const MaskPlan& plan) {
    check_plan_rows(seq.features, plan, "zero_masked");
    std::vector<double> feats = seq.features.values();
    const std::size_t pd = seq.features.dim(1);
    for (std::size_t i : plan.masked) std::fill_n(feats.begin() + static_cast<std::ptrdiff_t>(i * pd), pd, 0.0);
    return {seq.grid, Tensor::matrix(seq.features.dim(0), pd, std::move(feats)), seq.coords};
}

// Line-oriented dump:
//   mask_plan 1
//   N <total>
//   gamma <realized ratio>
//   masked <i0> <i1> ...
inline void write_mask_plan(std::ostream& os, const MaskPlan& plan) {
    os << "mask_plan 1\n";
    os << "N " << plan.total << '\n';
    std::ostringstream g;
    g.precision(17);
    g << plan.gamma();
    os << "gamma " << g.str() << '\n';
    os << "masked";
    for (std::size_t i : plan.masked) os << ' ' << i;
    os << '\n';
}

inline MaskPlan read_mask_plan(std::istream& is) {
    std::string line, key;
    std::size_t version = 0, total = 0;
    double gamma = 0.0;
    auto next = [&](const char* expected) {
        if (!std::getline(is, line)) throw FormatError(std::string("mask plan: missing '") + expected + "' line");
        std::istringstream ls(line);
        ls >> key;
        if (key != expected) throw FormatError(std::string("mask plan: expected '") + expected + "', found '" + key + "'");
        return ls;
    };
    next("mask_plan") >> version;
    if (version != 1) throw FormatError("mask plan: unsupported version " + std::to_string(version));
    next("N") >> total;
    next("gamma") >> gamma;
    std::istringstream ls = next("masked");
    std::vector<std::size_t> masked;
    for (std::size_t i; ls >> i;) masked.push_back(i);
    MaskPlan plan = MaskPlan::from_masked(total, std::move(masked));
    if (std::abs(plan.gamma() - gamma) > 1e-12) throw FormatError("mask plan: gamma does not match the masked count");
    return plan;
}

} // namespace mamlab

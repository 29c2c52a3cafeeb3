#pragma once

// Shared on-disk synthetic dataset for trainer tests, generated once per process.

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <unistd.h>

#include "mamlab/trainer.hpp"

namespace mamlab::testing {

inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("mamlab_" + std::to_string(::getpid())) / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// Default 4-class set: 200 clips of 2 s.
inline const std::filesystem::path& default_manifest() {
    static const std::filesystem::path manifest = generate_synth_dataset(SynthDatasetSpec{}, scratch_dir("synth_default"));
    return manifest;
}

inline const Corpus& default_corpus() {
    static const Corpus corpus = load_corpus(default_manifest(), RunConfig{}.target_frames());
    return corpus;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline RunConfig small_run(Mode mode, std::uint64_t seed, const std::filesystem::path& out, std::size_t steps) {
    RunConfig c;
    c.mode = mode;
    c.seed = seed;
    c.out = out;
    c.steps = steps;
    c.batch_size = 4;
    c.optim.lr = 1e-3;
    return c;
}

} // namespace mamlab::testing

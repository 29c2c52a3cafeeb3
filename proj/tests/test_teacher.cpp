#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mamlab/teacher.hpp"

namespace mamlab {
namespace {

MelSpectrogram random_spec(std::size_t frames, std::uint64_t seed) {
    MelSpectrogram s;
    s.frames = frames;
    s.mels = 128;
    Rng rng(seed);
    s.values.resize(frames * 128);
    for (double& x : s.values) x = rng.normal();
    return s;
}

TeacherSpec small_teacher(std::uint64_t seed = 3) {
    TeacherSpec ts;
    ts.feature_dim = 32;
    ts.seed = seed;
    return ts;
}

std::filesystem::path temp_path(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "mamlab_test_teacher";
    std::filesystem::create_directories(dir);
    return dir / name;
}

TEST(Teacher, SameInputSameSeedIsBitIdentical) {
    const MelSpectrogram s = random_spec(64, 1);
    const Tensor a = teacher_targets(s, small_teacher());
    const Tensor b = teacher_targets(s, small_teacher());
    EXPECT_EQ(a.values(), b.values());
    EXPECT_NE(a.values(), teacher_targets(s, small_teacher(4)).values());
    EXPECT_EQ(a.shape(), (Shape{32, 32}));
}

TEST(Teacher, RowsHaveUnitNorm) {
    const Tensor t = teacher_targets(random_spec(1024, 2), small_teacher());
    ASSERT_EQ(t.shape(), (Shape{512, 32}));
    for (std::size_t r = 0; r < 512; ++r) {
        double ss = 0;
        for (std::size_t c = 0; c < 32; ++c) ss += t.at(r, c) * t.at(r, c);
        EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-9);
    }
}

TEST(Teacher, NormalizeOffKeepsRawOutput) {
    TeacherSpec ts = small_teacher();
    ts.normalize = false;
    const MelSpectrogram s = random_spec(64, 2);
    const Tensor raw = teacher_targets(s, ts);
    const Tensor unit = teacher_targets(s, small_teacher());
    EXPECT_EQ(normalize_rows(raw).values(), unit.values());
}

TEST(Teacher, PerturbingOnePatchChangesItsRow) {
    const MelSpectrogram s = random_spec(64, 5);
    MelSpectrogram p = s;
    // patch (t=2, f=5)
    for (std::size_t dt = 0; dt < 16; ++dt) {
        for (std::size_t df = 0; df < 16; ++df) p.at(2 * 16 + dt, 5 * 16 + df) += 1.5;
    }
    const Tensor a = teacher_targets(s, small_teacher());
    const Tensor b = teacher_targets(p, small_teacher());
    const std::size_t row = PatchGrid{4, 8, 16}.index(2, 5);
    bool differs = false;
    for (std::size_t c = 0; c < 32; ++c) differs = differs || a.at(row, c) != b.at(row, c);
    EXPECT_TRUE(differs);
}

TEST(Teacher, ParametersAreFrozenAndRecordNothing) {
    const MelSpectrogram s = random_spec(64, 5);
    const FrozenRandomTeacher teacher(small_teacher(), PatchGrid{4, 8, 16});
    for (const auto& p : teacher.params().items()) EXPECT_FALSE(p.tensor.requires_grad()) << p.name;
    const std::size_t before = recorded_node_count();
    const Tensor t = teacher.targets(s);
    EXPECT_EQ(recorded_node_count(), before);
    EXPECT_FALSE(t.requires_grad());
}

TEST(Teacher, DimensionChecks) {
    EXPECT_THROW(check_teacher_dim(small_teacher(), 16), ConfigError);
    EXPECT_NO_THROW(check_teacher_dim(small_teacher(), 32));
    const FrozenRandomTeacher teacher(small_teacher(), PatchGrid{4, 8, 16});
    EXPECT_THROW(teacher.targets(random_spec(128, 1)), DimensionError);
}

TEST(PrecomputedTargets, RoundTripIsBitExact) {
    const Tensor t = teacher_targets(random_spec(1024, 9), small_teacher());
    const auto path = temp_path("round_trip.targets");
    save_precomputed_targets(path, t);
    const Tensor back = load_precomputed_targets(path, 512, 32);
    EXPECT_EQ(back.shape(), (Shape{512, 32}));
    EXPECT_EQ(back.values(), t.values());
}

TEST(PrecomputedTargets, ShapeMismatchNamesExpectedAndFound) {
    const auto path = temp_path("mismatch.targets");
    save_precomputed_targets(path, Tensor::zeros({512, 16}));
    try {
        load_precomputed_targets(path, 512, 32);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("expected 512x32"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("found 512x16"), std::string::npos) << e.what();
    }
}

TEST(PrecomputedTargets, TruncatedFileIsFormatError) {
    const auto path = temp_path("truncated.targets");
    save_precomputed_targets(path, Tensor::filled({512, 32}, 0.5));
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 9);
    EXPECT_THROW(load_precomputed_targets(path, 512, 32), FormatError);
    EXPECT_THROW(load_precomputed_targets(temp_path("absent.targets"), 512, 32), IoError);
}

TEST(PrecomputedTargets, DirectoryResolvesPerClip) {
    TeacherSpec ts = small_teacher();
    ts.kind = TeacherKind::precomputed_file;
    ts.path = temp_path("");
    EXPECT_EQ(precomputed_target_path(ts, "/data/clip_007.wav"), ts.path / "clip_007.targets");
    ts.path = temp_path("one.targets");
    EXPECT_EQ(precomputed_target_path(ts, "/data/clip_007.wav"), ts.path);
}

} // namespace
} // namespace mamlab

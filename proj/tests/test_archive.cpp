#include <gtest/gtest.h>

#include <filesystem>

#include "mamlab/archive.hpp"

namespace mamlab {
namespace {

Archive sample_archive() {
    Archive a;
    a.header.set("kind", "test");
    a.header.set("note", "a=b");
    a.blocks.push_back({"w", {2, 3}, {1.5, -0.0, 3e-310, 1e300, -7.25, 0.1}});
    a.blocks.push_back({"s", {}, {42.0}});
    a.blocks.push_back({"empty", {0, 4}, {}});
    return a;
}

TEST(Archive, EncodeDecodeRoundTripIsBitExact) {
    const Archive a = sample_archive();
    const Archive b = decode_archive(encode_archive(a));
    EXPECT_EQ(b.header, a.header);
    EXPECT_EQ(b.header.get("note"), "a=b");
    ASSERT_EQ(b.blocks.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(b.blocks[i].name, a.blocks[i].name);
        EXPECT_EQ(b.blocks[i].shape, a.blocks[i].shape);
        ASSERT_EQ(b.blocks[i].values.size(), a.blocks[i].values.size());
        for (std::size_t k = 0; k < a.blocks[i].values.size(); ++k) {
            EXPECT_EQ(std::bit_cast<std::uint64_t>(b.blocks[i].values[k]), std::bit_cast<std::uint64_t>(a.blocks[i].values[k]));
        }
    }
}

TEST(Archive, LayoutStartsWithMagicAndVersion) {
    const std::string bytes = encode_archive(sample_archive());
    EXPECT_EQ(bytes.substr(0, 8), std::string("MAMLABv\0", 8));
    EXPECT_EQ(bytes[8], 1);
    EXPECT_EQ(bytes[9], 0);
}

TEST(Archive, CorruptionIsFormatError) {
    std::string bytes = encode_archive(sample_archive());
    EXPECT_THROW(decode_archive(bytes.substr(0, bytes.size() - 1)), FormatError);
    EXPECT_THROW(decode_archive(bytes + "x"), FormatError);
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_archive(bad_magic), FormatError);
    std::string bad_version = bytes;
    bad_version[8] = 2;
    EXPECT_THROW(decode_archive(bad_version), FormatError);
    EXPECT_THROW(decode_archive(""), FormatError);
}

TEST(Archive, MissingHeaderKeyIsFormatError) {
    EXPECT_THROW(sample_archive().header.get("absent"), FormatError);
    EXPECT_THROW(KeyValues::from_text("no equals sign\n"), FormatError);
}

TEST(Archive, FileRoundTripAndMissingFile) {
    const auto dir = std::filesystem::temp_directory_path() / "mamlab_test_archive";
    const auto path = dir / "nested" / "a.bin";
    write_archive(path, sample_archive());
    EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
    EXPECT_EQ(read_archive(path).blocks[0].values, sample_archive().blocks[0].values);
    EXPECT_THROW(read_archive(dir / "absent.bin"), IoError);
}

TEST(Archive, ShapeValueMismatchIsRejectedOnWrite) {
    Archive a;
    a.blocks.push_back({"bad", {2, 2}, {1.0}});
    EXPECT_THROW(encode_archive(a), ContractError);
}

} // namespace
} // namespace mamlab

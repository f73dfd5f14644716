#include "milab/dataset.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

namespace milab {
namespace {

namespace fs = std::filesystem;

std::vector<unsigned char> idx_images(int n, int h, int w, unsigned char fill) {
    std::vector<unsigned char> b = {0, 0, 8, 3};
    auto be32 = [&](std::uint32_t v) {
        b.push_back(static_cast<unsigned char>(v >> 24));
        b.push_back(static_cast<unsigned char>(v >> 16));
        b.push_back(static_cast<unsigned char>(v >> 8));
        b.push_back(static_cast<unsigned char>(v));
    };
    be32(static_cast<std::uint32_t>(n));
    be32(static_cast<std::uint32_t>(h));
    be32(static_cast<std::uint32_t>(w));
    b.insert(b.end(), static_cast<std::size_t>(n) * h * w, fill);
    return b;
}

std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& labels) {
    std::vector<unsigned char> b = {0, 0, 8, 1};
    auto be32 = [&](std::uint32_t v) {
        b.push_back(static_cast<unsigned char>(v >> 24));
        b.push_back(static_cast<unsigned char>(v >> 16));
        b.push_back(static_cast<unsigned char>(v >> 8));
        b.push_back(static_cast<unsigned char>(v));
    };
    be32(static_cast<std::uint32_t>(labels.size()));
    b.insert(b.end(), labels.begin(), labels.end());
    return b;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("milab_test_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

TEST(LoadIdx, ParsesHeaderAndRescalesEndpoints) {
    TempDir dir;
    auto img = idx_images(2, 28, 28, 0);
    img[16] = 255;  // first pixel of first image
    write_file_atomic(dir.path / "im", img);
    write_file_atomic(dir.path / "la", idx_labels({3, 7}));
    Dataset ds = load_idx(dir.path / "im", dir.path / "la");
    EXPECT_EQ(ds.n(), 2);
    EXPECT_EQ(ds.height(), 28);
    EXPECT_EQ(ds.width(), 28);
    EXPECT_DOUBLE_EQ(ds.images[0], 1.0);   // byte 255 -> +1
    EXPECT_DOUBLE_EQ(ds.images[1], -1.0);  // byte 0 -> -1
    EXPECT_EQ(ds.labels, (std::vector<int>{3, 7}));
    EXPECT_EQ(ds.class_set, (std::vector<int>{3, 7}));
    ds.validate();
}

TEST(LoadIdx, WrongMagicNamesOffset) {
    TempDir dir;
    auto img = idx_images(1, 4, 4, 0);
    img[2] = 9;  // corrupt type byte
    write_file_atomic(dir.path / "im", img);
    write_file_atomic(dir.path / "la", idx_labels({0}));
    try {
        load_idx(dir.path / "im", dir.path / "la");
        FAIL() << "expected magic error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset 0"), std::string::npos);
    }
}

TEST(LoadIdx, CountMismatchIsAnError) {
    TempDir dir;
    write_file_atomic(dir.path / "im", idx_images(10, 4, 4, 0));
    std::vector<unsigned char> nine(9, 0);
    write_file_atomic(dir.path / "la", idx_labels(nine));
    EXPECT_THROW(load_idx(dir.path / "im", dir.path / "la"), std::runtime_error);
}

TEST(LoadIdx, TruncatedPayloadIsAnError) {
    TempDir dir;
    auto img = idx_images(2, 4, 4, 0);
    img.resize(img.size() - 5);
    write_file_atomic(dir.path / "im", img);
    write_file_atomic(dir.path / "la", idx_labels({0, 1}));
    EXPECT_THROW(load_idx(dir.path / "im", dir.path / "la"), std::runtime_error);
}

Dataset ten_class_toy() {
    Dataset ds = synth_blobs(10, 6, 8, 123);
    return ds;
}

TEST(SplitDisjoint, ClassSetsDisjointAndSizesSum) {
    Dataset ds = ten_class_toy();
    SplitSpec spec;
    spec.private_classes = {0, 1, 2, 3, 4};
    spec.public_classes = {5, 6, 7, 8, 9};
    SplitResult sr = split_disjoint(ds, spec);
    EXPECT_EQ(sr.private_set.n() + sr.public_set.n(), ds.n());
    for (int c : sr.private_set.class_set) {
        for (int d : sr.public_set.class_set) EXPECT_NE(c + 100, d + 100) << "overlap";
    }
    // private labels are dense 0..K-1
    EXPECT_EQ(sr.private_set.class_set, (std::vector<int>{0, 1, 2, 3, 4}));
    EXPECT_EQ(sr.index_map.at(3), 3);
    // public keeps original ids
    EXPECT_EQ(sr.public_set.class_set, (std::vector<int>{5, 6, 7, 8, 9}));
    sr.private_set.validate();
    sr.public_set.validate();
}

TEST(SplitDisjoint, DenseReindexFollowsSortedOrder) {
    Dataset ds = ten_class_toy();
    SplitSpec spec;
    spec.private_classes = {7, 2, 9};
    spec.public_classes = {0, 1};
    SplitResult sr = split_disjoint(ds, spec);
    EXPECT_EQ(sr.index_map.at(2), 0);
    EXPECT_EQ(sr.index_map.at(7), 1);
    EXPECT_EQ(sr.index_map.at(9), 2);
    EXPECT_EQ(sr.private_set.class_set, (std::vector<int>{0, 1, 2}));
}

TEST(SplitDisjoint, AllClassesPrivateMakesPublicEmptyError) {
    Dataset ds = ten_class_toy();
    SplitSpec spec;
    spec.private_classes = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    spec.public_classes = {17};  // disjoint but absent from the data
    EXPECT_THROW(split_disjoint(ds, spec), std::runtime_error);
}

TEST(SplitDisjoint, OverlapIsAnError) {
    Dataset ds = ten_class_toy();
    SplitSpec spec;
    spec.private_classes = {0, 1};
    spec.public_classes = {1, 2};
    EXPECT_THROW(split_disjoint(ds, spec), std::runtime_error);
}

TEST(SynthBlobs, SmallestCase) {
    Dataset ds = synth_blobs(2, 1, 8, 1);
    EXPECT_EQ(ds.n(), 2);
    EXPECT_EQ(ds.class_set, (std::vector<int>{0, 1}));
    ds.validate();
}

TEST(SynthBlobs, SameSeedBitwiseIdentical) {
    Dataset a = synth_blobs(3, 4, 12, 77);
    Dataset b = synth_blobs(3, 4, 12, 77);
    ASSERT_EQ(a.images.size(), b.images.size());
    for (std::int64_t i = 0; i < a.images.size(); ++i) EXPECT_EQ(a.images[i], b.images[i]);
    EXPECT_EQ(a.labels, b.labels);
}

TEST(SynthBlobs, DifferentSeedsDiffer) {
    Dataset a = synth_blobs(2, 2, 8, 1);
    Dataset b = synth_blobs(2, 2, 8, 2);
    bool any_diff = false;
    for (std::int64_t i = 0; i < a.images.size() && !any_diff; ++i)
        any_diff = a.images[i] != b.images[i];
    EXPECT_TRUE(any_diff);
}

TEST(DatasetCache, RoundTripIsBitwise) {
    TempDir dir;
    Dataset ds = synth_blobs(3, 5, 10, 99);
    save_dataset(ds, dir.path / "cache.bin");
    Dataset back = load_dataset(dir.path / "cache.bin");
    ASSERT_EQ(back.images.shape, ds.images.shape);
    for (std::int64_t i = 0; i < ds.images.size(); ++i) EXPECT_EQ(back.images[i], ds.images[i]);
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.class_set, ds.class_set);
}

TEST(DatasetCache, CorruptedPayloadDetected) {
    TempDir dir;
    Dataset ds = synth_blobs(2, 2, 8, 5);
    save_dataset(ds, dir.path / "cache.bin");
    auto bytes = read_file_bytes(dir.path / "cache.bin");
    bytes[10] ^= 0xFF;
    write_file_atomic(dir.path / "cache.bin", bytes);
    EXPECT_THROW(load_dataset(dir.path / "cache.bin"), std::runtime_error);
}

}  // namespace
}  // namespace milab

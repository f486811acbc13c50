#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "asw/data.hpp"

using namespace asw;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("asw_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::size_t count_ones(const Tensor& m) {
    std::size_t n = 0;
    for (double v : m.vec()) n += v == 1.0;
    return n;
}

}  // namespace

TEST(Synth, ForcedPixelCount) {
    SynthSpec spec;
    spec.size = 4;
    spec.ratio_min = spec.ratio_max = 0.25;
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(count_ones(gen_pair(spec, i).mask), 4u);
}

TEST(Synth, UnreachableRatio) {
    SynthSpec spec;
    spec.size = 4;
    spec.ratio_min = spec.ratio_max = 0.3;  // 4.8 pixels
    EXPECT_THROW(gen_pair(spec, 0), SpecError);
    spec.ratio_min = 0.0;
    EXPECT_THROW(spec.validate(), SpecError);
}

TEST(Synth, DeterministicPerSeedAndIndex) {
    SynthSpec spec;
    spec.seed = 9;
    const auto a = gen_pair(spec, 3), b = gen_pair(spec, 3), c = gen_pair(spec, 4);
    EXPECT_EQ(a.image.vec(), b.image.vec());
    EXPECT_EQ(a.mask.vec(), b.mask.vec());
    EXPECT_EQ(a.id, b.id);
    EXPECT_NE(a.image.vec(), c.image.vec());
}

TEST(Synth, MasksBinaryAndRatiosInBand) {
    SynthSpec spec;
    spec.size = 32;
    spec.seed = 1;
    double sum = 0.0;
    const std::size_t n = 1000;
    for (std::size_t i = 0; i < n; ++i) {
        const auto p = gen_pair(spec, i);
        for (double v : p.mask.vec()) ASSERT_TRUE(v == 0.0 || v == 1.0);
        for (double v : p.image.vec()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
        const double r = p.lesion_ratio();
        EXPECT_GE(r, spec.ratio_min - 1e-12);
        EXPECT_LE(r, spec.ratio_max + 1e-12);
        sum += r;
    }
    const double mean = sum / n;
    EXPECT_GE(mean, 0.02);
    EXPECT_LE(mean, 0.10);
}

TEST(Synth, LesionBrighterThanBackground) {
    SynthSpec spec;
    spec.channels = 3;
    const auto p = gen_pair(spec, 0);
    EXPECT_EQ(p.image.shape(), (Shape{3, 64, 64}));
    double in = 0, out = 0;
    const std::size_t hw = 64 * 64;
    for (std::size_t i = 0; i < hw; ++i) (p.mask[i] > 0.5 ? in : out) += p.image[i];
    const double k = count_ones(p.mask);
    EXPECT_GT(in / k, out / (hw - k) + 0.1);
}

TEST(Split, DisjointCoverAndSeedStable) {
    SynthSpec spec;
    spec.size = 16;
    const auto s1 = split_dataset(gen_dataset(spec, 200), 5);
    const auto s2 = split_dataset(gen_dataset(spec, 200), 5);
    EXPECT_EQ(s1.train.size() + s1.val.size(), 200u);
    std::set<std::string> ids;
    for (const auto& p : s1.train) ids.insert(p.id);
    for (const auto& p : s1.val) EXPECT_FALSE(ids.count(p.id));
    ASSERT_EQ(s1.val.size(), s2.val.size());
    for (std::size_t i = 0; i < s1.val.size(); ++i) EXPECT_EQ(s1.val[i].id, s2.val[i].id);
    EXPECT_GT(s1.val.size(), 20u);
    EXPECT_LT(s1.val.size(), 60u);
}

TEST(Stack, BuildsBatches) {
    SynthSpec spec;
    spec.size = 16;
    const auto data = gen_dataset(spec, 3);
    const std::vector<std::size_t> idx{2, 0};
    const Tensor x = stack_images(data, idx), m = stack_masks(data, idx);
    EXPECT_EQ(x.shape(), (Shape{2, 1, 16, 16}));
    EXPECT_EQ(m.shape(), (Shape{2, 1, 16, 16}));
    EXPECT_EQ(x[0], data[2].image[0]);
    EXPECT_EQ(m[256 + 17], data[0].mask[17]);
}

TEST(LoadDir, EmptyDirectories) {
    const auto root = scratch_dir("empty");
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    const auto r = load_pair_dir(root / "images", root / "masks");
    EXPECT_TRUE(r.pairs.empty());
    EXPECT_TRUE(r.errors.empty());
    fs::remove_all(root);
}

TEST(LoadDir, RoundTripWithinQuantization) {
    const auto root = scratch_dir("roundtrip");
    SynthSpec spec;
    spec.size = 32;
    spec.channels = 3;
    const auto pair = gen_pair(spec, 7);
    std::vector<ManifestEntry> entries{save_pair(root, pair)};
    write_manifest(root / "manifest.json", entries);
    const auto r = load_pair_dir(root / "images", root / "masks");
    ASSERT_TRUE(r.errors.empty()) << r.errors.front();
    ASSERT_EQ(r.pairs.size(), 1u);
    const auto& got = r.pairs[0];
    EXPECT_EQ(got.id, pair.id);
    EXPECT_EQ(got.mask.vec(), pair.mask.vec());
    ASSERT_EQ(got.image.shape(), pair.image.shape());
    for (std::size_t i = 0; i < got.image.numel(); ++i) EXPECT_LE(std::abs(got.image[i] - pair.image[i]), 0.5 / 255 + 1e-12);
    const auto manifest = nlohmann::json::parse(std::ifstream(root / "manifest.json"));
    EXPECT_EQ(manifest[0]["id"], pair.id);
    EXPECT_NEAR(manifest[0]["ratio"].get<double>(), pair.lesion_ratio(), 1e-15);
    fs::remove_all(root);
}

TEST(LoadDir, PerFileErrorsAndCropping) {
    const auto root = scratch_dir("errors");
    const std::vector<double> img20(20 * 20, 0.4), mask20(20 * 20, 0.8), small(4, 0.0);
    write_pgm(root / "images" / "a.pgm", 20, 20, img20);
    write_pgm(root / "masks" / "a.pgm", 20, 20, mask20);
    write_pgm(root / "images" / "orphan.pgm", 2, 2, small);
    write_pgm(root / "images" / "b.pgm", 2, 2, small);
    write_pgm(root / "masks" / "b.pgm", 4, 1, small);
    std::ofstream(root / "images" / "c.pgm") << "P2\n1 1\n255\n0\n";
    std::ofstream(root / "masks" / "c.pgm") << "P2\n1 1\n255\n0\n";

    auto r = load_pair_dir(root / "images", root / "masks");
    EXPECT_TRUE(r.pairs.empty());
    EXPECT_EQ(r.errors.size(), 4u);  // orphan, size mismatch, bad format, indivisible size

    r = load_pair_dir(root / "images", root / "masks", true);
    ASSERT_EQ(r.pairs.size(), 1u);
    EXPECT_EQ(r.pairs[0].mask.shape(), (Shape{1, 16, 16}));
    for (double v : r.pairs[0].mask.vec()) EXPECT_EQ(v, 1.0);
    fs::remove_all(root);
}

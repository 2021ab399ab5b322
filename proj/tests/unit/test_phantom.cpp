#include <fstream>
#include <iterator>

#include <gtest/gtest.h>

#include "memseg/morphometry.hpp"
#include "memseg/phantom.hpp"
#include "test_util.hpp"

using namespace memseg;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

} // namespace

TEST(Phantom, SlabHasFiveLayersAtTwoMillimetres) {
    const auto b = generate(slab_phantom_spec(2.0, 0.5));
    std::size_t layers = 0;
    for (std::size_t y = 0; y < b.mask->geometry.dims[1]; ++y) layers += b.mask->at(12, y, 12) == 1;
    EXPECT_EQ(layers, 5u);
}

TEST(Phantom, ZeroNoiseIsPiecewiseConstant) {
    auto spec = default_phantom_spec();
    spec.noise_sigma = 0.0;
    const auto b = generate(spec);
    for (std::size_t i = 0; i < b.image.data.size(); ++i) {
        const int l = b.mask->labels[i];
        const double want = l == 4 ? spec.meniscus.mean
                            : l    ? spec.cartilage.mean
                            : b.bone->labels[i] ? spec.bone_tissue.mean
                                                : spec.background.mean;
        ASSERT_EQ(b.image.data[i], want);
    }
}

TEST(Phantom, DefaultLayoutHasAllClassesAndRecordsThickness) {
    const auto b = generate(default_phantom_spec(2.0, 1.5, 2.5));
    std::vector<std::size_t> counts(5, 0);
    for (auto l : b.mask->labels) ++counts[l];
    for (int c = 1; c <= 4; ++c) EXPECT_GT(counts[c], 500u) << c;
    const auto t = nlohmann::json::parse(b.meta.at("expected_thickness"));
    EXPECT_EQ(t.at("2").get<double>(), 1.5);
    EXPECT_FALSE(t.contains("4"));
}

TEST(Phantom, LabelsLieInsideAnalyticRegion) {
    const auto spec = default_phantom_spec();
    const auto b = generate(spec);
    const auto& g = b.mask->geometry;
    for (std::size_t z = 0; z < g.dims[0]; ++z)
        for (std::size_t y = 0; y < g.dims[1]; ++y)
            for (std::size_t x = 0; x < g.dims[2]; ++x) {
                const int l = b.mask->at(z, y, x);
                if (!l) continue;
                ASSERT_TRUE(spec.structures[static_cast<std::size_t>(l - 1)].contains(g.to_mm(z, y, x), spec.bones));
            }
}

TEST(Phantom, OverlapIsSpecError) {
    auto spec = slab_phantom_spec(2.0, 0.5);
    spec.structures.push_back(spec.structures[0]);
    spec.structures[1].class_id = 2;
    try {
        generate(spec);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::SpecError);
    }
    auto thin = slab_phantom_spec(0.2, 0.5);
    try {
        generate(thin);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::SpecError);
    }
}

TEST(Phantom, DefaultCorpusSpecsNeverOverlap) {
    CorpusRanges r;
    for (std::uint64_t i = 0; i < 6; ++i) EXPECT_NO_THROW(generate(randomized_spec(r, 99, i)));
}

TEST(Corpus, SplitAndByteDeterminism) {
    const auto dir = tutil::scratch_dir();
    CorpusRanges r;
    r.dims = {24, 24, 24};
    r.spacing = {32.0 / 24, 32.0 / 24, 32.0 / 24};
    const auto m = generate_corpus(10, r, 5, dir / "a");
    EXPECT_EQ(m.split("train").size(), 8u);
    EXPECT_EQ(m.split("val").size(), 2u);
    generate_corpus(10, r, 5, dir / "b");
    for (const auto& e : m.volumes)
        for (const auto& f : {e.image, e.mask, e.bone}) EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    EXPECT_EQ(slurp(dir / "a" / "manifest.json"), slurp(dir / "b" / "manifest.json"));

    const auto back = read_manifest(dir / "a" / "manifest.json");
    ASSERT_EQ(back.volumes.size(), 10u);
    for (const auto& e : back.volumes) {
        const auto b = load_manifest_volume(back, e);
        EXPECT_NO_THROW(b.validate());
        EXPECT_TRUE(b.mask && b.bone);
        EXPECT_EQ(e.expected_thickness.size(), 3u);
    }
}

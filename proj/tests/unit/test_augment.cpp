#include <gtest/gtest.h>

#include "memseg/augment.hpp"
#include "test_util.hpp"

using namespace memseg;

namespace {

AugmentConfig only_flip() {
    auto c = AugmentConfig::disabled();
    c.p_flip_z = 1.0;
    return c;
}

} // namespace

TEST(Augment, DisabledIsIdentity) {
    const auto b = tutil::toy_bundle(6, 12, 1);
    for (std::uint64_t i = 0; i < 5; ++i) {
        const auto out = augment(b, AugmentConfig::disabled(), i);
        EXPECT_EQ(out.image.data, b.image.data);
        EXPECT_EQ(out.mask->labels, b.mask->labels);
    }
}

TEST(Augment, SameSampleSameResult) {
    const auto b = tutil::toy_bundle(6, 12, 2);
    AugmentConfig c;
    c.seed = 77;
    const auto x = augment(b, c, 3), y = augment(b, c, 3);
    EXPECT_EQ(x.image.data, y.image.data);
    EXPECT_EQ(x.mask->labels, y.mask->labels);
    bool any_diff = false;
    for (std::uint64_t i = 0; i < 8 && !any_diff; ++i) any_diff = augment(b, c, i).image.data != x.image.data;
    EXPECT_TRUE(any_diff);
}

TEST(Augment, FlipReversesSlices) {
    const auto b = tutil::toy_bundle(5, 10, 3);
    const auto out = augment(b, only_flip(), 0);
    const auto& g = b.image.geometry;
    for (std::size_t z = 0; z < 5; ++z)
        for (std::size_t y = 0; y < 10; ++y)
            for (std::size_t x = 0; x < 10; ++x) {
                EXPECT_EQ(out.image.at(z, y, x), b.image.at(4 - z, y, x));
                EXPECT_EQ(out.mask->at(z, y, x), b.mask->at(4 - z, y, x));
            }
    EXPECT_EQ(out.image.geometry, g);
}

TEST(Augment, LabelsStayInClassList) {
    const auto b = tutil::toy_bundle(6, 12, 4);
    AugmentConfig c;
    c.p_rotate = c.p_elastic = c.p_noise = c.p_bias = 1.0;
    c.seed = 5;
    for (std::uint64_t i = 0; i < 4; ++i) {
        const auto out = augment(b, c, i);
        EXPECT_NO_THROW(out.validate());
        EXPECT_EQ(out.image.geometry, b.image.geometry);
    }
}

TEST(Augment, ZeroAngleRotationIsIdentity) {
    const auto b = tutil::toy_bundle(4, 8, 5);
    const auto r = rotate_volume(b.image, 1, 2, 0.0);
    for (std::size_t i = 0; i < r.data.size(); ++i) EXPECT_NEAR(r.data[i], b.image.data[i], 1e-12);
}

TEST(Augment, RejectsBadProbabilities) {
    auto c = AugmentConfig::disabled();
    c.p_noise = 1.5;
    const auto b = tutil::toy_bundle(2, 4, 1);
    tutil::expect_code([&] { augment(b, c, 0); }, ErrorCode::InvalidArgument);
}

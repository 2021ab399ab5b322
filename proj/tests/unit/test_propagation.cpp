#include <gtest/gtest.h>

#include "gradcheck_suite.hpp"
#include "memseg/propagation.hpp"
#include "test_util.hpp"

using namespace memseg;

namespace {

LabelMask band(std::size_t depth, std::size_t first, std::size_t last) {
    LabelMask m(Geometry{{depth, 4, 4}, {1, 1, 1}, {0, 0, 0}}, {"bg", "a", "b"});
    for (std::size_t z = first; z <= last; ++z) m.at(z, 1, 1) = 1;
    return m;
}

std::vector<std::size_t> range(std::size_t a, std::size_t b) {
    std::vector<std::size_t> v;
    for (std::size_t i = a; i <= b; ++i) v.push_back(i);
    return v;
}

} // namespace

TEST(Strategy, Parse) {
    EXPECT_EQ(PropagationStrategy::parse("all"), PropagationStrategy::all());
    EXPECT_EQ(PropagationStrategy::parse("every:10").k, 10);
    EXPECT_EQ(PropagationStrategy::parse("every:10").to_string(), "every:10");
    for (const char* bad : {"every:0", "every:", "every:x", "every:3x", "some", ""})
        tutil::expect_code([&] { PropagationStrategy::parse(bad); }, ErrorCode::InvalidArgument);
}

TEST(Plan, AllEveryK) {
    const auto m = band(20, 3, 12);
    EXPECT_EQ(plan_prompt_slices(m, 1, PropagationStrategy::all()), range(3, 12));
    EXPECT_EQ(plan_prompt_slices(m, 1, PropagationStrategy::every(5)), (std::vector<std::size_t>{3, 8}));
    EXPECT_EQ(plan_prompt_slices(m, 1, PropagationStrategy::every(10)), (std::vector<std::size_t>{3}));
    EXPECT_EQ(plan_prompt_slices(m, 1, PropagationStrategy::every(50)), (std::vector<std::size_t>{3}));
    EXPECT_EQ(plan_prompt_slices(m, 1, PropagationStrategy::every(1)), range(3, 12));
    tutil::expect_code([&] { plan_prompt_slices(m, 2, PropagationStrategy::all()); }, ErrorCode::EmptyStructure);
}

TEST(Plan, SkipsSlicesWithoutTheStructure) {
    auto m = band(20, 0, 19);
    for (std::size_t z = 4; z < 14; ++z) m.at(z, 1, 1) = 0;
    EXPECT_EQ(plan_prompt_slices(m, 1, PropagationStrategy::every(2)), (std::vector<std::size_t>{0, 2, 14, 16, 18}));
}

TEST(Normalize, ZeroMeanUnitVariance) {
    const auto b = tutil::toy_bundle(4, 8, 1);
    const auto n = normalize_intensity(b.image);
    double mean = 0, sq = 0;
    for (double v : n.data) mean += v;
    mean /= static_cast<double>(n.data.size());
    for (double v : n.data) sq += (v - mean) * (v - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq / static_cast<double>(n.data.size()), 1.0, 1e-9);
}

class Propagate : public ::testing::Test {
protected:
    Model<float> model{suite::tiny_config(), 3};
    VolumeBundle b = tutil::toy_bundle(6, 8, 2);
};

TEST_F(Propagate, ClickBudgets) {
    PropagationOptions opt;
    opt.strategy = PropagationStrategy::every(50);
    const auto r = propagate(model, b.image, *b.mask, opt);
    ASSERT_EQ(r.classes.size(), 2u);
    for (const auto& c : r.classes) {
        EXPECT_EQ(c.prompted_slices.size(), 1u);
        EXPECT_EQ(c.clicks, 1u);
    }
    EXPECT_EQ(r.total_clicks(), 2u);
    EXPECT_EQ(r.mask.geometry, b.image.geometry);

    opt.strategy = PropagationStrategy::all();
    opt.clicks = 3;
    const auto all = propagate(model, b.image, *b.mask, opt);
    for (const auto& c : all.classes) {
        EXPECT_GE(c.clicks, c.prompted_slices.size());
        EXPECT_LE(c.clicks, 3 * c.prompted_slices.size());
        for (const auto& k : c.click_log) {
            EXPECT_EQ(k.class_id, c.class_id);
            const bool inside = b.mask->at(k.slice, k.row, k.col) == c.class_id;
            EXPECT_EQ(inside, k.polarity == Polarity::Positive);
        }
    }
    EXPECT_EQ(all.classes[0].prompted_slices, range(1, 4));
    EXPECT_EQ(all.classes[1].prompted_slices, range(3, 5));
}

TEST_F(Propagate, SameSeedSameMask) {
    PropagationOptions opt;
    opt.seed = 17;
    const auto x = propagate(model, b.image, *b.mask, opt), y = propagate(model, b.image, *b.mask, opt);
    EXPECT_EQ(x.mask.labels, y.mask.labels);
    ASSERT_EQ(x.classes[0].click_log.size(), y.classes[0].click_log.size());
    EXPECT_EQ(x.classes[0].click_log, y.classes[0].click_log);
}

TEST_F(Propagate, AbsentClassIsSkipped) {
    LabelMask only = *b.mask;
    for (auto& v : only.labels)
        if (v == 2) v = 0;
    const auto r = propagate(model, b.image, only, {});
    ASSERT_EQ(r.classes.size(), 2u);
    EXPECT_TRUE(r.classes[1].prompted_slices.empty());
    EXPECT_EQ(r.classes[1].clicks, 0u);
    for (auto v : r.mask.labels) EXPECT_NE(v, 2);
}

TEST_F(Propagate, Errors) {
    const auto big = tutil::toy_bundle(3, 16, 1);
    tutil::expect_code([&] { propagate(model, big.image, *big.mask, {}); }, ErrorCode::ConfigMismatch);
    PropagationOptions opt;
    opt.clicks = 0;
    tutil::expect_code([&] { propagate(model, b.image, *b.mask, opt); }, ErrorCode::InvalidArgument);
    const auto other = tutil::toy_bundle(5, 8, 1);
    tutil::expect_code([&] { propagate(model, b.image, *other.mask, {}); }, ErrorCode::DimensionError);
}

TEST_F(Propagate, SweepRowsPerClass) {
    std::vector<SweepCase> cases = {{"v0", &b.image, &*b.mask}};
    const auto s = sweep_strategies(model, cases, {PropagationStrategy::all(), PropagationStrategy::every(3)}, {1, 2});
    EXPECT_EQ(s.rows.size(), 8u);
    for (const auto& r : s.rows) {
        EXPECT_GE(r.dsc, 0.0);
        EXPECT_LE(r.dsc, 1.0);
        EXPECT_LE(r.iou, r.dsc + 1e-12);
        EXPECT_EQ(r.n, 1u);
    }
    EXPECT_EQ(s.records.size(), 16u);
}

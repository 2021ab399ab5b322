#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "memseg/edt.hpp"
#include "memseg/prompts.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace memseg;

TEST(Edt, MatchesBruteForce) {
    std::mt19937_64 gen(1);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t rows = 1 + gen() % 32, cols = 1 + gen() % 32;
        const auto m = trial % 2 ? tutil::random_mask(gen, rows, cols, 0.1 + 0.85 * double(gen() % 100) / 100.0)
                                 : oracle::random_blobs(gen, rows, cols);
        ASSERT_EQ(edt2d_squared(m).values, oracle::edt_squared(m).values) << rows << "x" << cols;
    }
}

TEST(Edt, SingleForegroundPixelAndCorners) {
    Mask2D m(5, 5);
    m(2, 2) = 1;
    EXPECT_EQ(edt2d(m)(2, 2), 1.0);
    Mask2D full(4, 6, 1);
    full(0, 0) = 0;
    EXPECT_EQ(edt2d_squared(full)(3, 5), 9 + 25);
    Mask2D none(3, 3, 1);
    EXPECT_TRUE(std::isinf(edt2d(none)(1, 1)));
}

TEST(FirstClick, DiskClickNearCenter) {
    const auto rs = tutil::disk(32, 32, 16, 16, 10);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto c = first_click(rs, 1, seed);
        EXPECT_EQ(c.polarity, Polarity::Positive);
        // top 30% of a disk by area is the inner disk of radius sqrt(0.3) R
        EXPECT_LE(std::hypot(double(c.row) - 16, double(c.col) - 16), std::sqrt(0.3) * 10 + 1.0);
    }
}

TEST(FirstClick, AlwaysInEligibleSet) {
    std::mt19937_64 gen(2);
    for (int trial = 0; trial < 200; ++trial) {
        const auto rs = oracle::random_blobs(gen, 4 + gen() % 29, 4 + gen() % 29);
        const auto eligible = oracle::first_click_eligible(rs);
        const std::set<std::pair<std::size_t, std::size_t>> set(eligible.begin(), eligible.end());
        EXPECT_EQ(first_click_candidates(rs), eligible);
        const auto c = first_click(rs, 2, gen());
        EXPECT_TRUE(set.count({c.row, c.col}));
    }
}

TEST(FirstClick, EmptyMaskThrows) {
    try {
        first_click(Mask2D(8, 8), 1, 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyStructure);
    }
}

TEST(NextClick, EmptyPredictionClicksDiskCenter) {
    const auto rs = tutil::disk(11, 11, 5, 5, 5);
    const auto c = next_click(Mask2D(11, 11), rs, 1, 1);
    EXPECT_EQ(c.row, 5u);
    EXPECT_EQ(c.col, 5u);
    EXPECT_EQ(c.polarity, Polarity::Positive);
}

TEST(NextClick, FalsePositiveBlobIsNegative) {
    const auto rs = tutil::disk(32, 32, 10, 10, 5);
    auto pred = rs;
    const auto blob = tutil::disk(32, 32, 24, 24, 3);
    for (std::size_t i = 0; i < pred.size(); ++i) pred.values[i] |= blob.values[i];
    const auto c = next_click(pred, rs, 1, 1);
    EXPECT_TRUE(blob(c.row, c.col));
    EXPECT_EQ(c.polarity, Polarity::Negative);
}

TEST(NextClick, InteriorMostErrorPixel) {
    std::mt19937_64 gen(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t rows = 2 + gen() % 31, cols = 2 + gen() % 31;
        const auto rs = oracle::random_blobs(gen, rows, cols);
        const auto pred = oracle::random_blobs(gen, rows, cols);
        if (pred == rs) continue;
        Mask2D err(rows, cols);
        for (std::size_t i = 0; i < err.size(); ++i) err.values[i] = pred.values[i] != rs.values[i];
        const auto sq = oracle::edt_squared(err);
        const auto c = next_click(pred, rs, 1, 3);
        ASSERT_TRUE(err(c.row, c.col));
        const auto best = *std::max_element(sq.values.begin(), sq.values.end());
        EXPECT_EQ(sq(c.row, c.col), best);
        EXPECT_EQ(c.polarity == Polarity::Positive, rs(c.row, c.col) != 0);
        EXPECT_EQ(c.iteration, 3);
    }
}

TEST(NextClick, ConvergedWhenNoError) {
    const auto rs = tutil::disk(8, 8, 4, 4, 2);
    try {
        next_click(rs, rs, 1, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Converged);
    }
}

TEST(Session, OracleSegmenterStopsAfterOneClick) {
    const auto rs = tutil::disk(16, 16, 8, 8, 4);
    auto oracle_seg = [&](const Image2D&, const std::vector<ClickPrompt>&) { return rs; };
    const auto r = simulate_session(oracle_seg, Image2D(16, 16), rs, 1, {8, 1, false, 0});
    EXPECT_EQ(r.clicks.size(), 1u);
}

TEST(Session, AdversarialSegmenterUsesEveryIteration) {
    const auto rs = tutil::disk(16, 16, 8, 8, 4);
    auto empty = [&](const Image2D&, const std::vector<ClickPrompt>&) { return Mask2D(16, 16); };
    const auto r = simulate_session(empty, Image2D(16, 16), rs, 1, {8, 7, false, 3});
    ASSERT_EQ(r.clicks.size(), 8u);
    for (std::size_t i = 0; i < r.clicks.size(); ++i) {
        EXPECT_EQ(r.clicks[i].polarity, Polarity::Positive);
        EXPECT_TRUE(rs(r.clicks[i].row, r.clicks[i].col));
        EXPECT_EQ(r.clicks[i].iteration, int(i));
        EXPECT_EQ(r.clicks[i].slice, 3u);
    }
}

TEST(Session, SingleIterationIsFirstClick) {
    const auto rs = tutil::disk(16, 16, 8, 8, 5);
    auto empty = [&](const Image2D&, const std::vector<ClickPrompt>&) { return Mask2D(16, 16); };
    const auto r = simulate_session(empty, Image2D(16, 16), rs, 2, {1, 42, false, 0});
    ASSERT_EQ(r.clicks.size(), 1u);
    const auto f = first_click(rs, 2, 42);
    EXPECT_EQ(r.clicks[0].row, f.row);
    EXPECT_EQ(r.clicks[0].col, f.col);
}

TEST(Session, ClicksAccumulate) {
    const auto rs = tutil::disk(16, 16, 8, 8, 5);
    std::vector<std::size_t> seen;
    auto seg = [&](const Image2D&, const std::vector<ClickPrompt>& clicks) {
        seen.push_back(clicks.size());
        return Mask2D(16, 16);
    };
    simulate_session(seg, Image2D(16, 16), rs, 1, {4, 0, true, 0});
    EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3, 4}));
}

TEST(Clicks, JsonLinesRoundTrip) {
    std::vector<ClickPrompt> clicks{{3, 4, 5, Polarity::Positive, 1, 0}, {3, 9, 1, Polarity::Negative, 2, 1}};
    std::stringstream ss;
    write_clicks_jsonl(ss, clicks);
    const auto first_line = ss.str().substr(0, ss.str().find('\n'));
    const auto j = nlohmann::json::parse(first_line);
    EXPECT_EQ(j.at("polarity"), "pos");
    EXPECT_EQ(j.at("class"), 1);
    EXPECT_EQ(j.at("iter"), 0);
    const auto back = read_clicks_jsonl(ss);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].polarity, Polarity::Negative);
    EXPECT_EQ(back[1].row, 9u);
    EXPECT_EQ(back[1].class_id, 2);
}

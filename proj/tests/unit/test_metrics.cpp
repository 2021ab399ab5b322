#include <random>

#include <gtest/gtest.h>

#include "memseg/metrics.hpp"
#include "memseg/report.hpp"
#include "memseg/stats.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace memseg;

TEST(Overlap, HandCases) {
    Mask2D p(2, 4), r(2, 4);
    for (int i = 0; i < 4; ++i) p.values[i] = 1;
    EXPECT_EQ(dsc(p, p), 1.0);
    EXPECT_EQ(iou(p, p), 1.0);
    for (int i = 4; i < 8; ++i) r.values[i] = 1;
    EXPECT_EQ(dsc(p, r), 0.0);
    EXPECT_EQ(iou(p, r), 0.0);
    std::fill(r.values.begin(), r.values.end(), 0);
    r.values[2] = r.values[3] = r.values[4] = r.values[5] = 1;
    EXPECT_EQ(dsc(p, r), 0.5);
    EXPECT_EQ(iou(p, r), 2.0 / 6.0);
    EXPECT_EQ(dsc(Mask2D(3, 3), Mask2D(3, 3)), 1.0);
    EXPECT_EQ(iou(Mask2D(3, 3), Mask2D(3, 3)), 1.0);
}

TEST(Overlap, ShapeMismatchThrows) {
    try {
        dsc(Mask2D(2, 2), Mask2D(2, 3));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DimensionError);
    }
}

TEST(Overlap, IdentityAndSymmetryOnRandomPairs) {
    std::mt19937_64 gen(7);
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t rows = 1 + gen() % 16, cols = 1 + gen() % 16;
        const auto p = tutil::random_mask(gen, rows, cols, 0.05 + 0.9 * double(gen() % 100) / 100);
        const auto r = tutil::random_mask(gen, rows, cols, 0.05 + 0.9 * double(gen() % 100) / 100);
        const double d = dsc(p, r), j = iou(p, r);
        EXPECT_NEAR(j, d / (2 - d), 1e-12);
        EXPECT_LE(j, d);
        EXPECT_EQ(d, dsc(r, p));
        EXPECT_EQ(j, iou(r, p));
    }
}

TEST(Overlap, ScoreClassOnLabelMasks) {
    Geometry g{{2, 2, 2}, {1, 1, 1}, {0, 0, 0}};
    LabelMask a(g, default_class_names()), b(g, default_class_names());
    a.labels = {1, 1, 2, 0, 0, 0, 0, 0};
    b.labels = {1, 2, 2, 0, 0, 0, 0, 1};
    const auto s1 = score_class(a, b, 1, "v");
    EXPECT_DOUBLE_EQ(s1.dsc, 2.0 * 1 / 4);
    const auto s2 = score_class(a, b, 2, "v");
    EXPECT_DOUBLE_EQ(s2.dsc, 2.0 * 1 / 3);
    EXPECT_EQ(score_class(a, b, 3, "v").dsc, 1.0);
}

TEST(RankSum, KnownValues) {
    const auto r = wilcoxon_ranksum({1, 2, 3}, {4, 5, 6});
    EXPECT_EQ(r.p_value, 0.1);
    EXPECT_EQ(r.method, StatMethod::Exact);
    EXPECT_EQ(r.statistic, 6.0);
    EXPECT_EQ(wilcoxon_ranksum({1, 4}, {2, 3}).p_value, 1.0);
    EXPECT_EQ(wilcoxon_ranksum({2, 5, 7}, {2, 5, 7}).p_value, 1.0);
    EXPECT_EQ(wilcoxon_ranksum({3, 3}, {3, 3, 3}).p_value, 1.0);
}

TEST(RankSum, ExactMatchesEnumerationOracle) {
    std::mt19937_64 gen(8);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n1 = 1 + gen() % 5, n2 = 1 + gen() % (10 - n1);
        std::vector<double> a(n1), b(n2);
        const int range = 2 + int(gen() % 12); // small ranges force ties
        for (auto& v : a) v = double(gen() % range);
        for (auto& v : b) v = double(gen() % range);
        const auto r = wilcoxon_ranksum(a, b);
        EXPECT_EQ(r.method, StatMethod::Exact);
        EXPECT_NEAR(r.p_value, oracle::ranksum_p(a, b), 1e-15);
    }
}

TEST(RankSum, NormalApproximationCloseToExact) {
    std::mt19937_64 gen(9);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> a(6), b(6);
        for (auto& v : a) v = nd(gen);
        for (auto& v : b) v = nd(gen) + 0.5;
        EXPECT_NEAR(wilcoxon_normal(a, b).p_value, wilcoxon_exact(a, b).p_value, 0.02);
    }
}

TEST(RankSum, LargeSamplesUseNormalApproximation) {
    std::vector<double> a(10), b(10);
    for (int i = 0; i < 10; ++i) {
        a[i] = i;
        b[i] = i + 100;
    }
    const auto r = wilcoxon_ranksum(a, b);
    EXPECT_EQ(r.method, StatMethod::NormalApprox);
    EXPECT_LT(r.p_value, 0.001);
}

TEST(RankSum, Markers) {
    EXPECT_EQ(significance_marker(0.2), "");
    EXPECT_EQ(significance_marker(0.04), "†");
    EXPECT_EQ(significance_marker(1e-8), "‡");
}

TEST(Report, AggregateMeanStdAndAllRow) {
    std::vector<MetricRecord> recs{{"d", "m", "a", "dsc", 0.7, "v1"}, {"d", "m", "a", "dsc", 0.9, "v2"},
                                   {"d", "m", "b", "dsc", 0.5, "v1"}};
    const auto s = aggregate(recs);
    ASSERT_EQ(s.rows.size(), 3u);
    EXPECT_NEAR(s.rows[0].mean, 0.8, 1e-15);
    EXPECT_NEAR(s.rows[0].std, 0.1, 1e-15);
    EXPECT_EQ(s.rows[1].std, 0.0);
    EXPECT_EQ(s.rows[2].class_name, "All");
    EXPECT_NEAR(s.rows[2].mean, (0.8 + 0.5) / 2, 1e-15);
}

TEST(Report, EmptyGroupOmittedWithWarning) {
    std::vector<MetricRecord> recs{{"d", "m", "a", "aae", std::nan(""), "v1"}, {"d", "m", "b", "aae", 0.1, "v1"}};
    const auto s = aggregate(recs);
    EXPECT_EQ(s.rows.size(), 2u); // class b + All
    EXPECT_FALSE(s.warnings.empty());
}

TEST(Report, CsvRoundTrip) {
    std::mt19937_64 gen(10);
    std::vector<MetricRecord> recs;
    for (int i = 0; i < 40; ++i)
        recs.push_back({"set, one", "m" + std::to_string(i % 2), "c" + std::to_string(i % 3), "dsc",
                        std::uniform_real_distribution<>(0, 1)(gen), "v" + std::to_string(i)});
    const auto s = aggregate(recs);
    const auto back = parse_csv(render_csv(s.rows));
    ASSERT_EQ(back.size(), s.rows.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].dataset, s.rows[i].dataset);
        EXPECT_EQ(back[i].mean, s.rows[i].mean);
        EXPECT_EQ(back[i].std, s.rows[i].std);
        EXPECT_EQ(back[i].n, s.rows[i].n);
    }
}

TEST(Report, RampEndsAndMidpoint) {
    const auto f = rank_fractions({0.2, 0.9, 0.5});
    EXPECT_EQ(ramp_color(f[1]).css_class, "ramp-green");
    EXPECT_EQ(ramp_color(f[0]).css_class, "ramp-red");
    EXPECT_EQ(ramp_color(1.0).hex, "#006400");
    EXPECT_EQ(ramp_color(0.0).hex, "#8b0000");
    EXPECT_EQ(rank_fractions({0.4}), std::vector<double>{0.5});
    EXPECT_EQ(ramp_color(0.5).css_class, "ramp-mid");
    // errors: smaller is better
    const auto e = rank_fractions({0.1, 0.3}, false);
    EXPECT_EQ(e[0], 1.0);
}

TEST(Report, SignificanceMarkersInTables) {
    std::vector<MetricRecord> recs;
    for (int i = 0; i < 8; ++i) {
        recs.push_back({"d", "ours", "a", "dsc", 0.9 + 0.001 * i, "v" + std::to_string(i)});
        recs.push_back({"d", "base", "a", "dsc", 0.5 + 0.001 * i, "v" + std::to_string(i)});
    }
    auto s = aggregate(recs);
    const auto cmp = mark_significance(s, recs, "base");
    ASSERT_FALSE(cmp.empty());
    EXPECT_LT(cmp[0].test.p_value, 0.05);
    const auto csv = render_table_csv(s.rows);
    EXPECT_NE(csv.find("0.904 (0.002)†"), std::string::npos) << csv;
    const auto html = render_html(s.rows);
    EXPECT_NE(html.find("ramp-green"), std::string::npos);
    EXPECT_NE(html.find("ramp-red"), std::string::npos);
    EXPECT_NE(html.find("†"), std::string::npos);
}

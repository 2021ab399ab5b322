#include <gtest/gtest.h>

#include "gradcheck_suite.hpp"
#include "memseg/tensor.hpp"

using namespace memseg;

class GradCheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradCheck, AnalyticMatchesFiniteDifference) {
    const auto c = suite::gradcheck_cases().at(GetParam());
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        GradCheckReport rep;
        ASSERT_NO_THROW(rep = c.run(seed)) << c.name << " seed " << seed;
        EXPECT_LT(rep.max_rel_error, 1e-5) << c.name << " worst " << rep.worst;
    }
}

INSTANTIATE_TEST_SUITE_P(AllBlocks, GradCheck, ::testing::Range<std::size_t>(0, suite::gradcheck_cases().size()),
                         [](const auto& info) {
                             auto n = suite::gradcheck_cases()[info.param].name;
                             std::replace(n.begin(), n.end(), '.', '_');
                             return n;
                         });

TEST(GradCheckHarness, DetectsCorruptedGradient) {
    Parameter<double> p{"w", Mat<double>::Constant(2, 2, 0.3), {}};
    GradCheckOptions opt;
    opt.tamper = [](std::vector<Parameter<double>*>& ps) { ps[0]->grad(1, 1) += 1e-3; };
    try {
        grad_check({&p}, [&](Tape<double>& t) { return ops::sum_all(ops::gelu(t.param(p))); }, opt);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::GradCheckFailure);
        EXPECT_NE(std::string(e.what()).find("w"), std::string::npos);
    }
}

TEST(Ops, SoftmaxRowsSumToOne) {
    Mat<double> s(3, 4);
    s << 1, 2, 3, 4, -1000, 0, 1000, 2, 0, 0, 0, 0;
    const auto p = ops::softmax_rows(s);
    for (int r = 0; r < 3; ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-15);
    EXPECT_NEAR(p(2, 0), 0.25, 1e-15);
}

TEST(Ops, LayerNormStandardizesRows) {
    Tape<double> t(false);
    Mat<double> x(2, 5);
    x << 1, 2, 3, 4, 5, -3, 0, 3, 9, 1;
    auto y = ops::layer_norm(t.constant(x), t.constant(Mat<double>::Ones(1, 5)), t.constant(Mat<double>::Zero(1, 5)));
    for (int r = 0; r < 2; ++r) {
        EXPECT_NEAR(y.value().row(r).mean(), 0.0, 1e-12);
        EXPECT_NEAR(y.value().row(r).squaredNorm() / 5, 1.0, 1e-4);
    }
}

TEST(Ops, BilinearSameSizeIsIdentity) {
    Tape<double> t(false);
    Mat<double> x = Mat<double>::Random(12, 3);
    auto y = ops::bilinear_resize(t.constant(x), std::make_shared<const ops::BilinearPlan<double>>(3, 4, 3, 4));
    EXPECT_EQ(y.value(), x);
}

TEST(Ops, LossMatchesDirectFormula) {
    Tape<double> t(false);
    Mat<double> z(4, 1), q(4, 1);
    z << 2.0, -1.0, 0.5, -3.0;
    q << 1, 0, 0, 1;
    const double pw = 2.0, nw = 0.5;
    double ce = 0, inter = 0, ps = 0;
    for (int i = 0; i < 4; ++i) {
        const double p = 1 / (1 + std::exp(-z(i)));
        ce += (q(i) > 0.5 ? pw : nw) * -(q(i) * std::log(p) + (1 - q(i)) * std::log(1 - p));
        inter += p * q(i);
        ps += p;
    }
    const double want = ce / 4 + 1 - (2 * inter + 1) / (ps + q.sum() + 1);
    EXPECT_NEAR(ops::bce_dice_loss(t.constant(z), q, pw, nw).value()(0, 0), want, 1e-12);
}

TEST(Ops, PatchPoolAverages) {
    Tape<double> t(false);
    Mat<double> px = Mat<double>::Zero(16, 1);
    px(0, 0) = 4; // top-left pixel of a 4x4 slice
    auto y = ops::patch_pool(t.constant(px), 4, 2, 2);
    ASSERT_EQ(y.rows(), 4);
    ASSERT_EQ(y.cols(), 1);
    EXPECT_EQ(y.value()(0, 0), 1.0);
    EXPECT_EQ(y.value().sum(), 1.0);
}

TEST(Tape, NonRecordingRefusesBackward) {
    Tape<double> t(false);
    auto v = t.constant(Mat<double>::Ones(1, 1));
    EXPECT_THROW(t.backward(v), Error);
}

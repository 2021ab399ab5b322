#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "gradcheck_suite.hpp"
#include "memseg/checkpoint.hpp"
#include "memseg/io.hpp"
#include "memseg/optim.hpp"
#include "test_util.hpp"

using namespace memseg;

TEST(Adam, MatchesScalarRecurrence) {
    std::vector<Parameter<float>> params(1);
    params[0].name = "w";
    params[0].value = Mat<float>::Constant(1, 1, 0.5f);
    AdamState state;
    const double grads[] = {0.3, -0.1, 0.7, 0.0, -2.0};
    double w = 0.5, m = 0.0, v = 0.0;
    for (int t = 1; t <= 5; ++t) {
        const double g = grads[t - 1];
        params[0].grad = Mat<float>::Constant(1, 1, static_cast<float>(g));
        adam_step(params, state, 0.01);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        w -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
        EXPECT_NEAR(params[0].value(0, 0), w, 1e-6) << "step " << t;
    }
    EXPECT_EQ(state.step, 5u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    std::vector<Parameter<float>> params(1);
    params[0].value = Mat<float>::Zero(2, 2);
    params[0].grad = Mat<float>(2, 2);
    params[0].grad << 1.0f, -4.0f, 0.01f, -0.5f;
    AdamState state;
    adam_step(params, state, 1e-3);
    EXPECT_NEAR(params[0].value(0, 0), -1e-3, 1e-8);
    EXPECT_NEAR(params[0].value(0, 1), 1e-3, 1e-8);
    EXPECT_NEAR(params[0].value(1, 0), -1e-3, 1e-8);
    EXPECT_NEAR(params[0].value(1, 1), 1e-3, 1e-8);
}

TEST(Plateau, HalvesAfterPatienceAndStops) {
    PlateauSchedule s{1e-3, 1e-6, 2, 5};
    EXPECT_FALSE(s.update(0.5, 0));
    EXPECT_TRUE(s.improved_at(0));
    EXPECT_FALSE(s.update(0.5, 1)); // equal is not an improvement
    EXPECT_DOUBLE_EQ(s.lr, 1e-3);
    EXPECT_FALSE(s.update(0.4, 2));
    EXPECT_DOUBLE_EQ(s.lr, 5e-4);
    EXPECT_FALSE(s.update(0.6, 3));
    EXPECT_EQ(s.best_epoch, 3);
    double prev = s.lr;
    bool stopped = false;
    for (int e = 4; e < 20 && !stopped; ++e) {
        stopped = s.update(0.1, e);
        EXPECT_LE(s.lr, prev);
        prev = s.lr;
        if (stopped) EXPECT_EQ(e, 8);
    }
    EXPECT_TRUE(stopped);
    EXPECT_DOUBLE_EQ(s.lr, 1.25e-4);
}

TEST(Plateau, RespectsFloor) {
    PlateauSchedule s{4e-6, 1e-6, 1, 100};
    s.update(1.0, 0);
    for (int e = 1; e < 10; ++e) s.update(0.0, e);
    EXPECT_DOUBLE_EQ(s.lr, 1e-6);
    EXPECT_EQ(s.halvings, 2);
}

TEST(Checkpoint, RoundTripIsExact) {
    const auto dir = tutil::scratch_dir();
    Model<float> m(suite::tiny_config(), 11);
    AdamState adam;
    for (auto& p : m.params) p.grad = Mat<float>::Constant(p.value.rows(), p.value.cols(), 0.25f);
    adam_step(m.params, adam, 1e-3);
    const auto c = make_checkpoint(m, adam, 7, 0.83, {{"note", "x"}});
    save_checkpoint(c, dir / "a.ckpt");
    const auto r = load_checkpoint(dir / "a.ckpt");
    EXPECT_EQ(r.config, c.config);
    EXPECT_EQ(r.epoch, 7);
    EXPECT_DOUBLE_EQ(r.best_val_dsc, 0.83);
    EXPECT_EQ(r.extra["note"], "x");
    EXPECT_EQ(r.adam.step, 1u);
    ASSERT_EQ(r.tensors.size(), c.tensors.size());
    for (std::size_t i = 0; i < r.tensors.size(); ++i) {
        EXPECT_EQ(r.tensors[i].name, c.tensors[i].name);
        EXPECT_EQ(r.tensors[i].value, c.tensors[i].value);
        EXPECT_EQ(r.adam.m[i], adam.m[i]);
        EXPECT_EQ(r.adam.v[i], adam.v[i]);
    }
    const auto back = model_from_checkpoint(r);
    for (std::size_t i = 0; i < back.params.size(); ++i) EXPECT_EQ(back.params[i].value, m.params[i].value);

    save_checkpoint(r, dir / "b.ckpt");
    EXPECT_EQ(detail::read_file(dir / "a.ckpt"), detail::read_file(dir / "b.ckpt"));
}

TEST(Checkpoint, BadFiles) {
    const auto dir = tutil::scratch_dir();
    tutil::expect_code([&] { load_checkpoint(dir / "missing.ckpt"); }, ErrorCode::IoError);
    {
        std::ofstream f(dir / "junk.ckpt", std::ios::binary);
        f << "NOTACKPTxxxxxxxxxxxxxxxxxxxxx";
    }
    tutil::expect_code([&] { load_checkpoint(dir / "junk.ckpt"); }, ErrorCode::UnsupportedFormat);

    Model<float> m(suite::tiny_config(), 1);
    save_checkpoint(make_checkpoint(m, {}, 0, 0.0), dir / "ok.ckpt");
    auto bytes = detail::read_file(dir / "ok.ckpt");
    bytes[8] = 9; // version
    detail::write_file(dir / "v.ckpt", bytes);
    tutil::expect_code([&] { load_checkpoint(dir / "v.ckpt"); }, ErrorCode::UnsupportedFormat);
    bytes = detail::read_file(dir / "ok.ckpt");
    bytes.resize(bytes.size() - 16);
    detail::write_file(dir / "t.ckpt", bytes);
    tutil::expect_code([&] { load_checkpoint(dir / "t.ckpt"); }, ErrorCode::CorruptData);
}

TEST(Checkpoint, ArchitectureMismatch) {
    Model<float> m(suite::tiny_config(), 1);
    auto c = make_checkpoint(m, {}, 0, 0.0);
    c.config.encoder_blocks = 2;
    tutil::expect_code([&] { model_from_checkpoint(c); }, ErrorCode::ConfigMismatch);
    c = make_checkpoint(m, {}, 0, 0.0);
    c.tensors[0].value = Mat<float>::Zero(1, 1);
    tutil::expect_code([&] { model_from_checkpoint(c); }, ErrorCode::ConfigMismatch);
}

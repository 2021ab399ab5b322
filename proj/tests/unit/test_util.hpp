#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "memseg/error.hpp"
#include "memseg/volume.hpp"

namespace memseg::tutil {

/// Fresh per-test scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    auto dir = std::filesystem::temp_directory_path() / "memseg_tests" /
               (std::string(info->test_suite_name()) + "." + info->name());
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline Mask2D random_mask(std::mt19937_64& gen, std::size_t rows, std::size_t cols, double density) {
    std::bernoulli_distribution d(density);
    Mask2D m(rows, cols);
    for (auto& v : m.values) v = d(gen) ? 1 : 0;
    return m;
}

inline Mask2D disk(std::size_t rows, std::size_t cols, double cy, double cx, double r) {
    Mask2D m(rows, cols);
    for (std::size_t y = 0; y < rows; ++y)
        for (std::size_t x = 0; x < cols; ++x) {
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            m(y, x) = dy * dy + dx * dx <= r * r ? 1 : 0;
        }
    return m;
}

template <typename Fn>
void expect_code(Fn&& fn, ErrorCode code) {
    try {
        fn();
        ADD_FAILURE() << "no error thrown";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), code) << e.what();
    }
}

/// Small two-structure volume: a disk (class 1) on the middle slices and a
/// square (class 2) on the lower half, with distinct intensities.
inline VolumeBundle toy_bundle(std::size_t depth, std::size_t size, std::uint64_t seed) {
    Geometry g{{depth, size, size}, {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}};
    VolumeBundle b;
    b.image = Volume(g, 0.0);
    b.mask = LabelMask(g, {"background", "disk", "square"});
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> noise(0.0, 0.05);
    const double c = 0.5 * static_cast<double>(size - 1) + static_cast<double>(seed % 3) - 1.0;
    for (std::size_t z = 0; z < depth; ++z)
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
                const double r = 0.25 * static_cast<double>(size) * (1.0 - 0.3 * std::abs(static_cast<double>(z) - 0.5 * depth) / depth);
                std::uint8_t label = 0;
                if (z > 0 && z + 1 < depth && dy * dy + dx * dx <= r * r) label = 1;
                else if (z >= depth / 2 && y >= size - size / 4 && x < size / 4) label = 2;
                b.mask->at(z, y, x) = label;
                b.image.at(z, y, x) = (label == 1 ? 1.0 : label == 2 ? -1.0 : 0.0) + noise(gen);
            }
    return b;
}

} // namespace memseg::tutil

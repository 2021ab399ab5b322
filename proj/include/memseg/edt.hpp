#pragma once

// Exact 2D Euclidean distance transform (Meijster, Roerdink & Hesselink).
// All intermediate quantities are integers, so results equal the brute-force
// minimum bit for bit.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "memseg/volume.hpp"

namespace memseg {

using DistanceMap = Grid2D<double>;

/// Squared distance from each foreground pixel to the nearest background
/// pixel. Returns -1 everywhere when the mask has no background at all.
inline Grid2D<std::int64_t> edt2d_squared(const Mask2D& mask) {
    const auto rows = static_cast<std::int64_t>(mask.rows);
    const auto cols = static_cast<std::int64_t>(mask.cols);
    Grid2D<std::int64_t> out(mask.rows, mask.cols, 0);
    if (rows == 0 || cols == 0) return out;

    bool any_background = false;
    for (auto v : mask.values) any_background |= (v == 0);
    if (!any_background) {
        std::fill(out.values.begin(), out.values.end(), -1);
        return out;
    }

    // Column pass: vertical distance to nearest background; `inf` stands in for
    // columns with no background and exceeds any achievable distance.
    const std::int64_t inf = rows + cols;
    Grid2D<std::int64_t> g(mask.rows, mask.cols, 0);
    for (std::int64_t x = 0; x < cols; ++x) {
        g(0, x) = mask(0, x) ? inf : 0;
        for (std::int64_t y = 1; y < rows; ++y) g(y, x) = mask(y, x) ? g(y - 1, x) + 1 : 0;
        for (std::int64_t y = rows - 2; y >= 0; --y)
            if (g(y + 1, x) < g(y, x)) g(y, x) = g(y + 1, x) + 1;
    }

    // Row pass: lower envelope of parabolas x -> (x-u)^2 + g(u)^2.
    std::vector<std::int64_t> s(static_cast<std::size_t>(cols)), t(static_cast<std::size_t>(cols));
    for (std::int64_t y = 0; y < rows; ++y) {
        auto f = [&](std::int64_t x, std::int64_t i) { return (x - i) * (x - i) + g(y, i) * g(y, i); };
        auto sep = [&](std::int64_t i, std::int64_t u) {
            const std::int64_t num = u * u - i * i + g(y, u) * g(y, u) - g(y, i) * g(y, i);
            const std::int64_t den = 2 * (u - i);
            return num >= 0 ? num / den : -((-num + den - 1) / den); // floor division
        };
        std::int64_t q = 0;
        s[0] = 0;
        t[0] = 0;
        for (std::int64_t u = 1; u < cols; ++u) {
            while (q >= 0 && f(t[q], s[q]) > f(t[q], u)) --q;
            if (q < 0) {
                q = 0;
                s[0] = u;
            } else {
                const std::int64_t w = 1 + sep(s[q], u);
                if (w < cols) {
                    ++q;
                    s[q] = u;
                    t[q] = w;
                }
            }
        }
        for (std::int64_t u = cols - 1; u >= 0; --u) {
            out(y, u) = f(u, s[q]);
            if (u == t[q]) --q;
        }
    }
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (!mask.values[i]) out.values[i] = 0;
    return out;
}

/// Exact Euclidean distance (pixels) to the nearest background pixel; 0 on
/// background, +inf on every pixel of a mask that has no background.
inline DistanceMap edt2d(const Mask2D& mask) {
    const auto sq = edt2d_squared(mask);
    DistanceMap out(mask.rows, mask.cols, 0.0);
    for (std::size_t i = 0; i < mask.size(); ++i)
        out.values[i] = sq.values[i] < 0 ? std::numeric_limits<double>::infinity()
                                         : std::sqrt(static_cast<double>(sq.values[i]));
    return out;
}

} // namespace memseg

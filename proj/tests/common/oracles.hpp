#pragma once

// Slow reference implementations used to check the fast ones.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "memseg/morphometry.hpp"
#include "memseg/volume.hpp"

namespace memseg::oracle {

/// Squared distance to the nearest background pixel by exhaustive search;
/// -1 everywhere when there is no background.
inline Grid2D<std::int64_t> edt_squared(const Mask2D& m) {
    Grid2D<std::int64_t> out(m.rows, m.cols, 0);
    std::vector<std::pair<std::int64_t, std::int64_t>> bg;
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c)
            if (!m(r, c)) bg.emplace_back(static_cast<std::int64_t>(r), static_cast<std::int64_t>(c));
    if (bg.empty()) {
        std::fill(out.values.begin(), out.values.end(), -1);
        return out;
    }
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) {
            if (!m(r, c)) continue;
            std::int64_t best = std::numeric_limits<std::int64_t>::max();
            for (auto [br, bc] : bg) {
                const std::int64_t dr = static_cast<std::int64_t>(r) - br, dc = static_cast<std::int64_t>(c) - bc;
                best = std::min(best, dr * dr + dc * dc);
            }
            out(r, c) = best;
        }
    return out;
}

/// Top-30% eligible set for a first click: foreground pixels whose distance is
/// at least the 70th percentile (linear interpolation) of foreground distances.
inline std::vector<std::pair<std::size_t, std::size_t>> first_click_eligible(const Mask2D& m) {
    const auto sq = edt_squared(m);
    auto dist = [&](std::size_t i) {
        return sq.values[i] < 0 ? std::numeric_limits<double>::infinity() : std::sqrt(double(sq.values[i]));
    };
    std::vector<double> fg;
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m.values[i]) fg.push_back(dist(i));
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (fg.empty()) return out;
    std::sort(fg.begin(), fg.end());
    const double pos = 0.7 * double(fg.size() - 1);
    const auto lo = std::size_t(pos);
    const auto hi = std::min(lo + 1, fg.size() - 1);
    const double thr = fg[lo] == fg[hi] ? fg[lo] : fg[lo] + (pos - double(lo)) * (fg[hi] - fg[lo]);
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m.values[i] && dist(i) >= thr) out.emplace_back(i / m.cols, i % m.cols);
    return out;
}

inline double nearest_distance(const Vec3& p, const std::vector<Vec3>& set) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : set) {
        const double dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
        best = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    return std::sqrt(best);
}

/// Two-sided rank-sum p by listing every subset of size n1 as a bitmask.
/// Ranks are recomputed from scratch with an O(n^2) midrank rule.
inline double ranksum_p(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> all(a);
    all.insert(all.end(), b.begin(), b.end());
    const std::size_t n = all.size(), n1 = a.size();
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n; ++i) {
        double less = 0, equal = 0;
        for (double v : all) {
            less += v < all[i];
            equal += v == all[i];
        }
        rank[i] = less + (equal + 1.0) / 2.0;
    }
    double observed = 0;
    for (std::size_t i = 0; i < n1; ++i) observed += rank[i];
    const double mean = double(n1) * double(n + 1) / 2.0;
    if (std::all_of(all.begin(), all.end(), [&](double v) { return v == all[0]; })) return 1.0;
    std::size_t hits = 0, total = 0;
    for (std::uint32_t s = 0; s < (1u << n); ++s) {
        if (std::size_t(__builtin_popcount(s)) != n1) continue;
        double w = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (s >> i & 1u) w += rank[i];
        ++total;
        hits += std::abs(w - mean) >= std::abs(observed - mean) - 1e-9;
    }
    return double(hits) / double(total);
}

inline Mask2D random_blobs(std::mt19937_64& gen, std::size_t rows, std::size_t cols) {
    Mask2D m(rows, cols);
    std::uniform_int_distribution<int> count(1, 4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int k = count(gen);
    for (int i = 0; i < k; ++i) {
        const double cy = u(gen) * double(rows), cx = u(gen) * double(cols);
        const double r = 1.0 + u(gen) * 0.4 * double(std::min(rows, cols));
        for (std::size_t y = 0; y < rows; ++y)
            for (std::size_t x = 0; x < cols; ++x)
                if ((double(y) - cy) * (double(y) - cy) + (double(x) - cx) * (double(x) - cx) <= r * r) m(y, x) = 1;
    }
    return m;
}

/// Mean thickness over bone-surface points at least `margin` mm away from the
/// z and x faces of the grid (columns unaffected by the cut edges).
inline double interior_mean_thickness(const LabelMask& cart, const LabelMask& bone, double margin) {
    const auto pair = extract_surfaces(cart, 1, bone);
    const auto rep = thickness(pair);
    const auto& g = cart.geometry;
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pair.bone_surface.size(); ++i) {
        const auto& p = pair.bone_surface[i];
        bool inside = true;
        for (int a : {0, 2}) {
            const double lo = g.origin[a], hi = g.origin[a] + g.spacing[a] * double(g.dims[a] - 1);
            inside &= p[a] - lo >= margin && hi - p[a] >= margin;
        }
        if (!inside) continue;
        sum += rep.values[i];
        ++n;
    }
    return n ? sum / double(n) : std::nan("");
}

} // namespace memseg::oracle

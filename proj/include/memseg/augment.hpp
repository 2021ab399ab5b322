#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "json.hpp"
#include "memseg/resample.hpp"
#include "memseg/rng.hpp"
#include "memseg/volume.hpp"

namespace memseg {

struct AugmentConfig {
    double p_flip_z = 0.5;
    double p_rotate = 0.7;
    double max_deg_xy = 15.0;
    double max_deg_xz_yz = 9.0;
    double p_noise = 0.5;
    double noise_sigma_rel = 0.05;
    double p_bias = 0.2;
    int bias_order = 3;
    double bias_amp = 0.3;
    double p_elastic = 0.5;
    int elastic_grid = 4;
    double elastic_sigma_mm = 2.0;
    std::uint64_t seed = 0;

    void validate() const {
        for (double p : {p_flip_z, p_rotate, p_noise, p_bias, p_elastic})
            if (!(p >= 0.0 && p <= 1.0)) fail(ErrorCode::InvalidArgument, "augment probabilities must lie in [0,1]");
        for (double v : {max_deg_xy, max_deg_xz_yz, noise_sigma_rel, bias_amp, elastic_sigma_mm})
            if (!(v >= 0.0) || !std::isfinite(v)) fail(ErrorCode::InvalidArgument, "augment scales must be non-negative");
        if (bias_order < 0) fail(ErrorCode::InvalidArgument, "bias_order must be non-negative");
        if (elastic_grid < 2) fail(ErrorCode::InvalidArgument, "elastic_grid must be at least 2");
    }

    static AugmentConfig disabled() {
        AugmentConfig c;
        c.p_flip_z = c.p_rotate = c.p_noise = c.p_bias = c.p_elastic = 0.0;
        return c;
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentConfig, p_flip_z, p_rotate, max_deg_xy, max_deg_xz_yz, p_noise,
                                                noise_sigma_rel, p_bias, bias_order, bias_amp, p_elastic,
                                                elastic_grid, elastic_sigma_mm, seed)

namespace detail {

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 matmul3(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
    return r;
}

/// Rotation within the plane of axes (a, b), coordinates ordered (z, y, x).
inline Mat3 plane_rotation(int a, int b, double radians) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i) r[i][i] = 1.0;
    const double c = std::cos(radians), s = std::sin(radians);
    r[a][a] = c;
    r[a][b] = -s;
    r[b][a] = s;
    r[b][b] = c;
    return r;
}

struct ElasticField {
    int grid = 0;
    std::vector<Vec3> displacement_mm; // grid^3 control points, (z, y, x) order

    Vec3 at(const Vec3& unit) const {
        // unit coordinates in [0,1] per axis → trilinear over the control lattice
        std::size_t lo[3];
        double w[3];
        const double top = static_cast<double>(grid - 1);
        for (int a = 0; a < 3; ++a) {
            const double u = std::clamp(unit[a], 0.0, 1.0) * top;
            const double f = std::min(std::floor(u), top - 1.0);
            lo[a] = static_cast<std::size_t>(f);
            w[a] = u - f;
        }
        Vec3 d{0.0, 0.0, 0.0};
        const auto g = static_cast<std::size_t>(grid);
        for (int corner = 0; corner < 8; ++corner) {
            const std::size_t iz = lo[0] + ((corner >> 2) & 1), iy = lo[1] + ((corner >> 1) & 1), ix = lo[2] + (corner & 1);
            const double wt = ((corner & 4) ? w[0] : 1 - w[0]) * ((corner & 2) ? w[1] : 1 - w[1]) *
                              ((corner & 1) ? w[2] : 1 - w[2]);
            const Vec3& p = displacement_mm[(iz * g + iy) * g + ix];
            for (int a = 0; a < 3; ++a) d[a] += wt * p[a];
        }
        return d;
    }
};

template <typename Fn>
void for_each_voxel(const Geometry& g, Fn&& fn) {
    for (std::size_t z = 0; z < g.dims[0]; ++z)
        for (std::size_t y = 0; y < g.dims[1]; ++y)
            for (std::size_t x = 0; x < g.dims[2]; ++x) fn(z, y, x);
}

inline void flip_z(std::vector<double>& data, const Geometry& g) {
    const std::size_t n = g.slice_size();
    for (std::size_t lo = 0, hi = g.dims[0] - 1; lo < hi; ++lo, --hi)
        std::swap_ranges(data.begin() + static_cast<std::ptrdiff_t>(lo * n),
                         data.begin() + static_cast<std::ptrdiff_t>((lo + 1) * n),
                         data.begin() + static_cast<std::ptrdiff_t>(hi * n));
}

inline void flip_z(std::vector<std::uint8_t>& data, const Geometry& g) {
    const std::size_t n = g.slice_size();
    for (std::size_t lo = 0, hi = g.dims[0] - 1; lo < hi; ++lo, --hi)
        std::swap_ranges(data.begin() + static_cast<std::ptrdiff_t>(lo * n),
                         data.begin() + static_cast<std::ptrdiff_t>((lo + 1) * n),
                         data.begin() + static_cast<std::ptrdiff_t>(hi * n));
}

} // namespace detail

/// Rotates `volume` by `radians` in plane (axis_a, axis_b) about its center,
/// zero fill. Exposed for the inverse-rotation property tests.
inline Volume rotate_volume(const Volume& volume, int axis_a, int axis_b, double radians) {
    const Geometry& g = volume.geometry;
    const auto inv = detail::plane_rotation(axis_a, axis_b, -radians);
    Volume out(g);
    detail::for_each_voxel(g, [&](std::size_t z, std::size_t y, std::size_t x) {
        const double p[3] = {(static_cast<double>(z) - 0.5 * (g.dims[0] - 1.0)) * g.spacing[0],
                             (static_cast<double>(y) - 0.5 * (g.dims[1] - 1.0)) * g.spacing[1],
                             (static_cast<double>(x) - 0.5 * (g.dims[2] - 1.0)) * g.spacing[2]};
        double q[3];
        for (int i = 0; i < 3; ++i) q[i] = inv[i][0] * p[0] + inv[i][1] * p[1] + inv[i][2] * p[2];
        out.at(z, y, x) = sample_linear(volume, q[0] / g.spacing[0] + 0.5 * (g.dims[0] - 1.0),
                                        q[1] / g.spacing[1] + 0.5 * (g.dims[1] - 1.0),
                                        q[2] / g.spacing[2] + 0.5 * (g.dims[2] - 1.0), 0.0);
    });
    return out;
}

/// Training-time augmentation. The random stream is derived from
/// (config.seed, sample_index), so a sample replays identically on any thread.
inline VolumeBundle augment(const VolumeBundle& bundle, const AugmentConfig& config, std::uint64_t sample_index) {
    config.validate();
    Rng rng(Rng::derive(config.seed, sample_index, 0xA06));
    VolumeBundle out = bundle;
    const Geometry& g = bundle.image.geometry;

    if (rng.bernoulli(config.p_flip_z)) {
        detail::flip_z(out.image.data, g);
        if (out.mask) detail::flip_z(out.mask->labels, g);
        if (out.bone) detail::flip_z(out.bone->labels, g);
    }

    bool warp = false;
    detail::Mat3 inverse{};
    for (int i = 0; i < 3; ++i) inverse[i][i] = 1.0;
    if (rng.bernoulli(config.p_rotate)) {
        constexpr double deg = std::numbers::pi / 180.0;
        const double a_xy = rng.uniform(-config.max_deg_xy, config.max_deg_xy) * deg;
        const double a_xz = rng.uniform(-config.max_deg_xz_yz, config.max_deg_xz_yz) * deg;
        const double a_yz = rng.uniform(-config.max_deg_xz_yz, config.max_deg_xz_yz) * deg;
        // forward R = R_yz R_xz R_xy; the warp needs R^-1 = R_xy^T R_xz^T R_yz^T
        inverse = detail::matmul3(detail::plane_rotation(1, 2, -a_xy),
                                  detail::matmul3(detail::plane_rotation(0, 2, -a_xz), detail::plane_rotation(0, 1, -a_yz)));
        warp = true;
    }

    detail::ElasticField elastic;
    if (rng.bernoulli(config.p_elastic)) {
        elastic.grid = config.elastic_grid;
        const auto n = static_cast<std::size_t>(config.elastic_grid);
        elastic.displacement_mm.resize(n * n * n);
        for (auto& d : elastic.displacement_mm)
            for (auto& c : d) c = config.elastic_sigma_mm * rng.normal();
        warp = true;
    }

    if (warp) {
        const VolumeBundle src = out;
        const double cz = 0.5 * (g.dims[0] - 1.0), cy = 0.5 * (g.dims[1] - 1.0), cx = 0.5 * (g.dims[2] - 1.0);
        detail::for_each_voxel(g, [&](std::size_t z, std::size_t y, std::size_t x) {
            double p[3] = {(static_cast<double>(z) - cz) * g.spacing[0], (static_cast<double>(y) - cy) * g.spacing[1],
                           (static_cast<double>(x) - cx) * g.spacing[2]};
            if (elastic.grid > 0) {
                const Vec3 unit{g.dims[0] > 1 ? static_cast<double>(z) / (g.dims[0] - 1.0) : 0.0,
                                g.dims[1] > 1 ? static_cast<double>(y) / (g.dims[1] - 1.0) : 0.0,
                                g.dims[2] > 1 ? static_cast<double>(x) / (g.dims[2] - 1.0) : 0.0};
                const Vec3 d = elastic.at(unit);
                for (int a = 0; a < 3; ++a) p[a] += d[a];
            }
            double q[3];
            for (int i = 0; i < 3; ++i) q[i] = inverse[i][0] * p[0] + inverse[i][1] * p[1] + inverse[i][2] * p[2];
            const double iz = q[0] / g.spacing[0] + cz, iy = q[1] / g.spacing[1] + cy, ix = q[2] / g.spacing[2] + cx;
            out.image.at(z, y, x) = sample_linear(src.image, iz, iy, ix, 0.0);
            if (out.mask) out.mask->at(z, y, x) = sample_nearest(*src.mask, iz, iy, ix);
            if (out.bone) out.bone->at(z, y, x) = sample_nearest(*src.bone, iz, iy, ix);
        });
    }

    if (rng.bernoulli(config.p_noise)) {
        double sq = 0.0;
        for (double v : out.image.data) sq += v * v;
        const double rms = std::sqrt(sq / static_cast<double>(out.image.data.size()));
        const double sigma = config.noise_sigma_rel * rms;
        for (double& v : out.image.data) v += sigma * rng.normal();
    }

    if (rng.bernoulli(config.p_bias)) {
        // smooth multiplicative field 1 + amp * P(z,y,x), P a polynomial of total
        // degree <= bias_order over [-1,1]^3 scaled so that |P| <= 1
        struct Term {
            int ez, ey, ex;
            double c;
        };
        std::vector<Term> terms;
        double norm = 0.0;
        for (int ez = 0; ez <= config.bias_order; ++ez)
            for (int ey = 0; ey + ez <= config.bias_order; ++ey)
                for (int ex = 0; ex + ey + ez <= config.bias_order; ++ex) {
                    if (ez + ey + ex == 0) continue;
                    const double c = rng.uniform(-1.0, 1.0);
                    norm += std::abs(c);
                    terms.push_back({ez, ey, ex, c});
                }
        if (norm > 0.0) {
            detail::for_each_voxel(g, [&](std::size_t z, std::size_t y, std::size_t x) {
                const double u[3] = {g.dims[0] > 1 ? 2.0 * z / (g.dims[0] - 1.0) - 1.0 : 0.0,
                                     g.dims[1] > 1 ? 2.0 * y / (g.dims[1] - 1.0) - 1.0 : 0.0,
                                     g.dims[2] > 1 ? 2.0 * x / (g.dims[2] - 1.0) - 1.0 : 0.0};
                double p = 0.0;
                for (const auto& t : terms) p += t.c * std::pow(u[0], t.ez) * std::pow(u[1], t.ey) * std::pow(u[2], t.ex);
                out.image.at(z, y, x) *= 1.0 + config.bias_amp * p / norm;
            });
        }
    }
    return out;
}

} // namespace memseg

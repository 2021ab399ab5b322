#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "memseg/volume.hpp"

namespace memseg {

/// Trilinear sample at continuous voxel index (z, y, x). Points outside the
/// physical extent [-0.5, n-0.5] return `pad`; points inside are clamped to the
/// outermost voxel centers.
inline double sample_linear(const Volume& v, double z, double y, double x, double pad = 0.0) {
    const auto& d = v.geometry.dims;
    const double c[3] = {z, y, x};
    std::size_t lo[3];
    std::size_t hi[3];
    double w[3];
    for (int a = 0; a < 3; ++a) {
        const double n = static_cast<double>(d[a]);
        if (!(c[a] >= -0.5 && c[a] <= n - 0.5)) return pad;
        const double u = std::clamp(c[a], 0.0, n - 1.0);
        const double f = std::floor(u);
        lo[a] = static_cast<std::size_t>(f);
        hi[a] = std::min(lo[a] + 1, d[a] - 1);
        w[a] = u - f;
    }
    double acc = 0.0;
    for (int corner = 0; corner < 8; ++corner) {
        const bool bz = corner & 4, by = corner & 2, bx = corner & 1;
        const double wt = (bz ? w[0] : 1.0 - w[0]) * (by ? w[1] : 1.0 - w[1]) * (bx ? w[2] : 1.0 - w[2]);
        if (wt == 0.0) continue;
        acc += wt * v.at(bz ? hi[0] : lo[0], by ? hi[1] : lo[1], bx ? hi[2] : lo[2]);
    }
    return acc;
}

/// Nearest-neighbor label lookup with the same extent rule; outside → background.
inline std::uint8_t sample_nearest(const LabelMask& m, double z, double y, double x) {
    const auto& d = m.geometry.dims;
    const double c[3] = {z, y, x};
    std::size_t idx[3];
    for (int a = 0; a < 3; ++a) {
        const double n = static_cast<double>(d[a]);
        if (!(c[a] >= -0.5 && c[a] <= n - 0.5)) return 0;
        idx[a] = static_cast<std::size_t>(std::clamp(std::floor(c[a] + 0.5), 0.0, n - 1.0));
    }
    return m.at(idx[0], idx[1], idx[2]);
}

namespace detail {

struct AxisMap {
    double offset; // input continuous index of output voxel 0
    double step;   // input voxels per output voxel
};

inline std::array<AxisMap, 3> fov_axis_maps(const Geometry& in, const Vec3& fov, const Index3& dims) {
    std::array<AxisMap, 3> maps{};
    for (int a = 0; a < 3; ++a) {
        const double n = static_cast<double>(in.dims[a]);
        const double s_in = in.spacing[a];
        const double s_out = fov[a] / static_cast<double>(dims[a]);
        // Physical position measured from the input's lower edge; the target
        // box is centered on the input box.
        const double start = 0.5 * n * s_in - 0.5 * fov[a] + 0.5 * s_out;
        maps[a] = {start / s_in - 0.5, s_out / s_in};
    }
    return maps;
}

inline Geometry fov_geometry(const Geometry& in, const Vec3& fov, const Index3& dims) {
    Geometry out;
    out.dims = dims;
    for (int a = 0; a < 3; ++a) {
        const double n = static_cast<double>(in.dims[a]);
        out.spacing[a] = fov[a] / static_cast<double>(dims[a]);
        out.origin[a] = in.origin[a] + 0.5 * n * in.spacing[a] - 0.5 * fov[a] + 0.5 * out.spacing[a] -
                        0.5 * in.spacing[a];
    }
    return out;
}

} // namespace detail

inline Volume standardize_fov(const Volume& in, const Vec3& fov, const Index3& dims) {
    const auto maps = detail::fov_axis_maps(in.geometry, fov, dims);
    Volume out(detail::fov_geometry(in.geometry, fov, dims));
    for (std::size_t z = 0; z < dims[0]; ++z)
        for (std::size_t y = 0; y < dims[1]; ++y)
            for (std::size_t x = 0; x < dims[2]; ++x)
                out.at(z, y, x) = sample_linear(in, maps[0].offset + maps[0].step * static_cast<double>(z),
                                                maps[1].offset + maps[1].step * static_cast<double>(y),
                                                maps[2].offset + maps[2].step * static_cast<double>(x), 0.0);
    return out;
}

inline LabelMask standardize_fov(const LabelMask& in, const Vec3& fov, const Index3& dims) {
    const auto maps = detail::fov_axis_maps(in.geometry, fov, dims);
    LabelMask out(detail::fov_geometry(in.geometry, fov, dims), in.class_names);
    for (std::size_t z = 0; z < dims[0]; ++z)
        for (std::size_t y = 0; y < dims[1]; ++y)
            for (std::size_t x = 0; x < dims[2]; ++x)
                out.at(z, y, x) = sample_nearest(in, maps[0].offset + maps[0].step * static_cast<double>(z),
                                                 maps[1].offset + maps[1].step * static_cast<double>(y),
                                                 maps[2].offset + maps[2].step * static_cast<double>(x));
    return out;
}

/// Center crop / zero pad to the physical field of view `fov` (mm), then
/// resample onto `dims`; output spacing is fov / dims per axis.
inline VolumeBundle standardize_fov(const VolumeBundle& in, const Vec3& fov, const Index3& dims) {
    for (int a = 0; a < 3; ++a) {
        if (!(fov[a] > 0.0) || !std::isfinite(fov[a])) fail(ErrorCode::InvalidArgument, "target FoV must be positive");
        if (dims[a] == 0) fail(ErrorCode::InvalidArgument, "target dims must be positive");
    }
    in.validate();
    VolumeBundle out;
    out.image = standardize_fov(in.image, fov, dims);
    if (in.mask) out.mask = standardize_fov(*in.mask, fov, dims);
    if (in.bone) out.bone = standardize_fov(*in.bone, fov, dims);
    out.meta = in.meta;
    return out;
}

} // namespace memseg

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "memseg/error.hpp"

namespace memseg {

using Index3 = std::array<std::size_t, 3>; // (z, y, x)
using Vec3 = std::array<double, 3>;        // (z, y, x) in mm

/// Grid geometry shared by an image and every mask painted on it.
struct Geometry {
    Index3 dims{1, 1, 1};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
    std::size_t slice_size() const { return dims[1] * dims[2]; }

    std::size_t offset(std::size_t z, std::size_t y, std::size_t x) const {
        return (z * dims[1] + y) * dims[2] + x;
    }

    Vec3 to_mm(std::size_t z, std::size_t y, std::size_t x) const {
        return {origin[0] + spacing[0] * static_cast<double>(z),
                origin[1] + spacing[1] * static_cast<double>(y),
                origin[2] + spacing[2] * static_cast<double>(x)};
    }

    bool operator==(const Geometry&) const = default;

    void validate() const {
        for (int a = 0; a < 3; ++a) {
            if (dims[a] == 0) fail(ErrorCode::DimensionError, "dimension " + std::to_string(a) + " is zero");
            if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
                fail(ErrorCode::InvalidArgument, "spacing must be positive and finite");
            if (!std::isfinite(origin[a])) fail(ErrorCode::InvalidArgument, "origin must be finite");
        }
    }
};

/// 3D scalar image indexed (z, y, x).
struct Volume {
    Geometry geometry;
    std::vector<double> data;

    Volume() = default;
    explicit Volume(const Geometry& g, double fill = 0.0) : geometry(g), data(g.voxel_count(), fill) {}

    const Index3& dims() const { return geometry.dims; }
    double& at(std::size_t z, std::size_t y, std::size_t x) { return data[geometry.offset(z, y, x)]; }
    double at(std::size_t z, std::size_t y, std::size_t x) const { return data[geometry.offset(z, y, x)]; }

    void validate() const {
        geometry.validate();
        if (data.size() != geometry.voxel_count())
            fail(ErrorCode::SizeMismatch, "volume data length does not match dims");
        for (double v : data)
            if (!std::isfinite(v)) fail(ErrorCode::CorruptData, "non-finite voxel value");
    }
};

/// 3D class-label grid; label 0 is background.
struct LabelMask {
    Geometry geometry;
    std::vector<std::uint8_t> labels;
    std::vector<std::string> class_names{"background"};

    LabelMask() = default;
    LabelMask(const Geometry& g, std::vector<std::string> names)
        : geometry(g), labels(g.voxel_count(), 0), class_names(std::move(names)) {}

    std::size_t class_count() const { return class_names.size(); }
    std::uint8_t& at(std::size_t z, std::size_t y, std::size_t x) { return labels[geometry.offset(z, y, x)]; }
    std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const { return labels[geometry.offset(z, y, x)]; }

    void validate() const {
        geometry.validate();
        if (labels.size() != geometry.voxel_count())
            fail(ErrorCode::SizeMismatch, "label data length does not match dims");
        if (class_names.empty()) fail(ErrorCode::InvalidArgument, "class list is empty");
        for (auto v : labels)
            if (v >= class_names.size())
                fail(ErrorCode::CorruptData, "label " + std::to_string(v) + " outside class list of size " +
                                                 std::to_string(class_names.size()));
    }

    /// Binary mask of one class (1 where label == class_id).
    LabelMask binary(std::uint8_t class_id) const {
        LabelMask out(geometry, {"background", class_id < class_names.size() ? class_names[class_id] : "fg"});
        for (std::size_t i = 0; i < labels.size(); ++i) out.labels[i] = labels[i] == class_id ? 1 : 0;
        return out;
    }

    bool slice_contains(std::size_t z, std::uint8_t class_id) const {
        const std::size_t n = geometry.slice_size();
        for (std::size_t i = z * n; i < (z + 1) * n; ++i)
            if (labels[i] == class_id) return true;
        return false;
    }
};

inline std::vector<std::string> default_class_names() {
    return {"background", "femoral_cartilage", "tibial_cartilage", "patellar_cartilage", "meniscus"};
}

struct VolumeBundle {
    Volume image;
    std::optional<LabelMask> mask;
    std::optional<LabelMask> bone;
    std::map<std::string, std::string> meta;

    void validate() const {
        image.validate();
        if (mask) {
            mask->validate();
            if (!(mask->geometry == image.geometry)) fail(ErrorCode::DimensionError, "mask geometry differs from image");
        }
        if (bone) {
            bone->validate();
            if (!(bone->geometry == image.geometry)) fail(ErrorCode::DimensionError, "bone geometry differs from image");
            for (auto v : bone->labels)
                if (v > 1) fail(ErrorCode::CorruptData, "bone mask must be binary");
        }
    }
};

/// Row-major 2D grid used for single slices.
template <typename T>
struct Grid2D {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> values;

    Grid2D() = default;
    Grid2D(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), values(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    std::size_t size() const { return values.size(); }
    bool same_shape(const Grid2D& o) const { return rows == o.rows && cols == o.cols; }
    bool operator==(const Grid2D&) const = default;
};

using Mask2D = Grid2D<std::uint8_t>;
using Image2D = Grid2D<double>;

inline Image2D extract_slice(const Volume& v, std::size_t z) {
    Image2D s(v.geometry.dims[1], v.geometry.dims[2]);
    const std::size_t n = s.size();
    std::copy_n(v.data.begin() + static_cast<std::ptrdiff_t>(z * n), n, s.values.begin());
    return s;
}

/// Binary slice of one class from a label mask.
inline Mask2D extract_slice(const LabelMask& m, std::size_t z, std::uint8_t class_id) {
    Mask2D s(m.geometry.dims[1], m.geometry.dims[2]);
    const std::size_t n = s.size();
    for (std::size_t i = 0; i < n; ++i) s.values[i] = m.labels[z * n + i] == class_id ? 1 : 0;
    return s;
}

} // namespace memseg

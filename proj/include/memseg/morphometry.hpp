#pragma once

// Cartilage thickness: bone-side boundary voxels to their nearest
// articular-side boundary voxel, center to center, in mm.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <vector>

#include "json.hpp"
#include "memseg/error.hpp"
#include "memseg/volume.hpp"

namespace memseg {

struct SurfacePair {
    std::vector<Vec3> bone_surface;
    std::vector<Vec3> articular_surface;
};

struct ThicknessReport {
    std::vector<double> values; // mm, one per bone-surface point
    double mean = 0.0;
    double std = 0.0;
    std::size_t count = 0;
};

inline nlohmann::json to_json(const ThicknessReport& r, bool include_values = false) {
    nlohmann::json j{{"mean_mm", r.mean}, {"std_mm", r.std}, {"count", r.count}};
    if (include_values) j["values_mm"] = r.values;
    return j;
}

/// Surface partition by six-adjacency: a cartilage voxel is on the boundary if
/// any face neighbor (or the volume edge) is not cartilage; boundary voxels
/// touching bone form the bone surface, the rest the articular surface.
inline SurfacePair extract_surfaces(const LabelMask& cartilage, int class_id, const LabelMask& bone) {
    if (!(cartilage.geometry == bone.geometry)) fail(ErrorCode::DimensionError, "cartilage and bone geometry differ");
    const Geometry& g = cartilage.geometry;
    const auto& d = g.dims;
    auto is_cart = [&](std::size_t z, std::size_t y, std::size_t x) { return cartilage.at(z, y, x) == class_id; };

    SurfacePair pair;
    bool any = false;
    static constexpr int offsets[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
    for (std::size_t z = 0; z < d[0]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[2]; ++x) {
                if (!is_cart(z, y, x)) continue;
                any = true;
                bool boundary = false, touches_bone = false;
                for (const auto& o : offsets) {
                    const long long nz = static_cast<long long>(z) + o[0], ny = static_cast<long long>(y) + o[1],
                                    nx = static_cast<long long>(x) + o[2];
                    if (nz < 0 || ny < 0 || nx < 0 || nz >= static_cast<long long>(d[0]) ||
                        ny >= static_cast<long long>(d[1]) || nx >= static_cast<long long>(d[2])) {
                        boundary = true;
                        continue;
                    }
                    const auto uz = static_cast<std::size_t>(nz), uy = static_cast<std::size_t>(ny),
                               ux = static_cast<std::size_t>(nx);
                    if (!is_cart(uz, uy, ux)) {
                        boundary = true;
                        if (bone.at(uz, uy, ux)) touches_bone = true;
                    }
                }
                if (!boundary) continue;
                (touches_bone ? pair.bone_surface : pair.articular_surface).push_back(g.to_mm(z, y, x));
            }
    if (!any) fail(ErrorCode::EmptyStructure, "cartilage mask has no voxels of class " + std::to_string(class_id));
    if (pair.bone_surface.empty()) fail(ErrorCode::NoBoneInterface, "no cartilage boundary voxel touches bone");
    return pair;
}

inline double squared_distance(const Vec3& a, const Vec3& b) {
    const double dz = a[0] - b[0], dy = a[1] - b[1], dx = a[2] - b[2];
    return dz * dz + dy * dy + dx * dx;
}

/// Static 3D k-d tree answering exact nearest-neighbor queries.
class KdTree {
public:
    explicit KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
        order_.resize(points_.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        if (!order_.empty()) root_ = build(0, order_.size(), 0);
    }

    /// Minimum squared distance from q to any stored point.
    double nearest_squared(const Vec3& q) const {
        double best = std::numeric_limits<double>::infinity();
        if (root_ >= 0) search(root_, q, best);
        return best;
    }

    std::size_t size() const { return points_.size(); }

private:
    struct Node {
        std::size_t point;
        int axis;
        int left = -1;
        int right = -1;
    };

    int build(std::size_t lo, std::size_t hi, int depth) {
        if (lo >= hi) return -1;
        const int axis = depth % 3;
        const std::size_t mid = lo + (hi - lo) / 2;
        std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(lo), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                         order_.begin() + static_cast<std::ptrdiff_t>(hi),
                         [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
        const int id = static_cast<int>(nodes_.size());
        nodes_.push_back({order_[mid], axis});
        const int l = build(lo, mid, depth + 1);
        const int r = build(mid + 1, hi, depth + 1);
        nodes_[static_cast<std::size_t>(id)].left = l;
        nodes_[static_cast<std::size_t>(id)].right = r;
        return id;
    }

    void search(int id, const Vec3& q, double& best) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        const Vec3& p = points_[n.point];
        best = std::min(best, squared_distance(p, q));
        const double diff = q[n.axis] - p[n.axis];
        const int near = diff < 0 ? n.left : n.right;
        const int far = diff < 0 ? n.right : n.left;
        if (near >= 0) search(near, q, best);
        if (far >= 0 && diff * diff <= best) search(far, q, best);
    }

    std::vector<Vec3> points_;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

inline ThicknessReport summarize_thickness(std::vector<double> values) {
    ThicknessReport r;
    r.values = std::move(values);
    r.count = r.values.size();
    if (r.count == 0) return r;
    for (double v : r.values) r.mean += v;
    r.mean /= static_cast<double>(r.count);
    double var = 0.0;
    for (double v : r.values) var += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(var / static_cast<double>(r.count));
    return r;
}

inline ThicknessReport thickness(const SurfacePair& pair) {
    if (pair.bone_surface.empty() || pair.articular_surface.empty())
        fail(ErrorCode::EmptyStructure, "thickness needs non-empty bone and articular surfaces");
    const KdTree tree(pair.articular_surface);
    std::vector<double> values;
    values.reserve(pair.bone_surface.size());
    for (const auto& p : pair.bone_surface) values.push_back(std::sqrt(tree.nearest_squared(p)));
    return summarize_thickness(std::move(values));
}

inline ThicknessReport measure_thickness(const LabelMask& cartilage, int class_id, const LabelMask& bone) {
    return thickness(extract_surfaces(cartilage, class_id, bone));
}

/// |mean thickness(pred) - mean thickness(ref)| for one structure; throws
/// MeasurementUnavailable when either side cannot be measured.
inline double thickness_error(const LabelMask& pred, const LabelMask& ref, const LabelMask& bone, int class_id) {
    double means[2];
    const LabelMask* masks[2] = {&pred, &ref};
    for (int i = 0; i < 2; ++i) {
        try {
            means[i] = measure_thickness(*masks[i], class_id, bone).mean;
        } catch (const Error& e) {
            if (e.code() == ErrorCode::EmptyStructure || e.code() == ErrorCode::NoBoneInterface)
                fail(ErrorCode::MeasurementUnavailable, std::string(i == 0 ? "prediction: " : "reference: ") + e.what());
            throw;
        }
    }
    return std::abs(means[0] - means[1]);
}

} // namespace memseg

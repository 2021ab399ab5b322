#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "memseg/error.hpp"
#include "memseg/volume.hpp"

namespace memseg {

struct OverlapCounts {
    std::size_t intersection = 0;
    std::size_t pred = 0;
    std::size_t ref = 0;

    std::size_t union_size() const { return pred + ref - intersection; }
};

inline OverlapCounts overlap_counts(std::span<const std::uint8_t> p, std::span<const std::uint8_t> r) {
    if (p.size() != r.size()) fail(ErrorCode::DimensionError, "mask sizes differ");
    OverlapCounts c;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool a = p[i] != 0, b = r[i] != 0;
        c.pred += a;
        c.ref += b;
        c.intersection += a && b;
    }
    return c;
}

/// 2|P∩R| / (|P|+|R|); two empty masks score 1.
inline double dsc(const OverlapCounts& c) {
    if (c.pred + c.ref == 0) return 1.0;
    return 2.0 * static_cast<double>(c.intersection) / static_cast<double>(c.pred + c.ref);
}

/// |P∩R| / |P∪R|; two empty masks score 1.
inline double iou(const OverlapCounts& c) {
    if (c.union_size() == 0) return 1.0;
    return static_cast<double>(c.intersection) / static_cast<double>(c.union_size());
}

inline double dsc(std::span<const std::uint8_t> p, std::span<const std::uint8_t> r) { return dsc(overlap_counts(p, r)); }
inline double iou(std::span<const std::uint8_t> p, std::span<const std::uint8_t> r) { return iou(overlap_counts(p, r)); }

inline double dsc(const Mask2D& p, const Mask2D& r) {
    if (!p.same_shape(r)) fail(ErrorCode::DimensionError, "slice shapes differ");
    return dsc(std::span<const std::uint8_t>(p.values), std::span<const std::uint8_t>(r.values));
}
inline double iou(const Mask2D& p, const Mask2D& r) {
    if (!p.same_shape(r)) fail(ErrorCode::DimensionError, "slice shapes differ");
    return iou(std::span<const std::uint8_t>(p.values), std::span<const std::uint8_t>(r.values));
}

struct OverlapScores {
    double dsc = 0.0;
    double iou = 0.0;
    int class_id = 0;
    std::string volume_id;
};

/// Per-class scores of a multi-label prediction against a reference.
inline OverlapScores score_class(const LabelMask& pred, const LabelMask& ref, int class_id, const std::string& volume_id) {
    if (pred.geometry.dims != ref.geometry.dims) fail(ErrorCode::DimensionError, "mask dims differ");
    OverlapCounts c;
    for (std::size_t i = 0; i < ref.labels.size(); ++i) {
        const bool a = pred.labels[i] == class_id, b = ref.labels[i] == class_id;
        c.pred += a;
        c.ref += b;
        c.intersection += a && b;
    }
    return {dsc(c), iou(c), class_id, volume_id};
}

} // namespace memseg

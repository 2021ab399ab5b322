#pragma once

// Simulated user clicks: a first click deep inside the reference structure,
// then corrective clicks at the interior-most point of the current error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "memseg/edt.hpp"
#include "memseg/error.hpp"
#include "memseg/rng.hpp"
#include "memseg/volume.hpp"

namespace memseg {

enum class Polarity : std::uint8_t { Negative = 0, Positive = 1 };

struct ClickPrompt {
    std::size_t slice = 0;
    std::size_t row = 0;
    std::size_t col = 0;
    Polarity polarity = Polarity::Positive;
    int class_id = 1;
    int iteration = 0;

    bool operator==(const ClickPrompt&) const = default;
};

inline nlohmann::json to_json(const ClickPrompt& c) {
    return {{"slice", c.slice}, {"row", c.row}, {"col", c.col},
            {"polarity", c.polarity == Polarity::Positive ? "pos" : "neg"}, {"class", c.class_id},
            {"iter", c.iteration}};
}

inline ClickPrompt click_from_json(const nlohmann::json& j) {
    ClickPrompt c;
    try {
        c.slice = j.at("slice").get<std::size_t>();
        c.row = j.at("row").get<std::size_t>();
        c.col = j.at("col").get<std::size_t>();
        const auto pol = j.at("polarity").get<std::string>();
        if (pol != "pos" && pol != "neg") fail(ErrorCode::InvalidArgument, "polarity must be pos|neg");
        c.polarity = pol == "pos" ? Polarity::Positive : Polarity::Negative;
        c.class_id = j.at("class").get<int>();
        c.iteration = j.at("iter").get<int>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::InvalidArgument, std::string("malformed click record: ") + e.what());
    }
    return c;
}

inline void write_clicks_jsonl(std::ostream& out, const std::vector<ClickPrompt>& clicks) {
    for (const auto& c : clicks) out << to_json(c).dump() << '\n';
}

inline std::vector<ClickPrompt> read_clicks_jsonl(std::istream& in) {
    std::vector<ClickPrompt> clicks;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            clicks.push_back(click_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            fail(ErrorCode::InvalidArgument, std::string("bad click line: ") + e.what());
        }
    }
    return clicks;
}

/// Linear-interpolated percentile (numpy's default rule) of unsorted values.
inline double percentile(std::vector<double> values, double pct) {
    if (values.empty()) fail(ErrorCode::InvalidArgument, "percentile of empty set");
    std::sort(values.begin(), values.end());
    const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    if (frac == 0.0 || values[lo] == values[hi]) return values[lo];
    return values[lo] + frac * (values[hi] - values[lo]);
}

/// Foreground pixels whose boundary distance is in the top 30% (>= the 70th
/// percentile of foreground distances), in row-major order.
inline std::vector<std::pair<std::size_t, std::size_t>> first_click_candidates(const Mask2D& rs) {
    const auto dist = edt2d(rs);
    std::vector<double> fg;
    for (std::size_t i = 0; i < rs.size(); ++i)
        if (rs.values[i]) fg.push_back(dist.values[i]);
    if (fg.empty()) fail(ErrorCode::EmptyStructure, "reference slice mask has no foreground");
    const double threshold = percentile(fg, 70.0);
    std::vector<std::pair<std::size_t, std::size_t>> eligible;
    for (std::size_t r = 0; r < rs.rows; ++r)
        for (std::size_t c = 0; c < rs.cols; ++c)
            if (rs(r, c) && dist(r, c) >= threshold) eligible.emplace_back(r, c);
    return eligible;
}

inline ClickPrompt first_click(const Mask2D& rs, int class_id, std::uint64_t rng_seed, std::size_t slice = 0) {
    const auto eligible = first_click_candidates(rs);
    Rng rng(Rng::derive(rng_seed, 0xF1C));
    const auto [r, c] = eligible[static_cast<std::size_t>(rng.below(eligible.size()))];
    return {slice, r, c, Polarity::Positive, class_id, 0};
}

/// Deterministic first click: the interior-most foreground pixel (maximal
/// boundary distance, smallest (row, col) on ties).
inline ClickPrompt centroid_click(const Mask2D& rs, int class_id, std::size_t slice = 0) {
    const auto dist = edt2d(rs);
    bool found = false;
    std::size_t br = 0, bc = 0;
    for (std::size_t r = 0; r < rs.rows; ++r)
        for (std::size_t c = 0; c < rs.cols; ++c)
            if (rs(r, c) && (!found || dist(r, c) > dist(br, bc))) {
                found = true;
                br = r;
                bc = c;
            }
    if (!found) fail(ErrorCode::EmptyStructure, "reference slice mask has no foreground");
    return {slice, br, bc, Polarity::Positive, class_id, 0};
}

inline Mask2D error_map(const Mask2D& pred, const Mask2D& rs) {
    if (!pred.same_shape(rs)) fail(ErrorCode::DimensionError, "prediction and reference slice shapes differ");
    Mask2D err(rs.rows, rs.cols);
    for (std::size_t i = 0; i < rs.size(); ++i) err.values[i] = (pred.values[i] != 0) != (rs.values[i] != 0);
    return err;
}

/// Corrective click at the interior-most error pixel; positive inside the
/// reference (false negative), negative outside (false positive). Throws
/// Error(Converged) when prediction and reference agree everywhere.
inline ClickPrompt next_click(const Mask2D& pred, const Mask2D& rs, int class_id, int iteration, std::size_t slice = 0) {
    const auto err = error_map(pred, rs);
    const auto dist = edt2d(err);
    bool found = false;
    std::size_t br = 0, bc = 0;
    for (std::size_t r = 0; r < err.rows; ++r)
        for (std::size_t c = 0; c < err.cols; ++c)
            if (err(r, c) && (!found || dist(r, c) > dist(br, bc))) {
                found = true;
                br = r;
                bc = c;
            }
    if (!found) fail(ErrorCode::Converged, "prediction matches reference");
    return {slice, br, bc, rs(br, bc) ? Polarity::Positive : Polarity::Negative, class_id, iteration};
}

struct SessionResult {
    std::vector<ClickPrompt> clicks;
    Mask2D prediction;
};

struct SessionOptions {
    int max_iters = 8;
    std::uint64_t seed = 0;
    bool deterministic_first_click = false; // centroid click instead of a seeded draw
    std::size_t slice = 0;
};

/// Segmenter: (image, clicks so far) -> binary prediction.
using Segmenter = std::function<Mask2D(const Image2D&, const std::vector<ClickPrompt>&)>;

template <typename SegmenterFn>
SessionResult simulate_session(SegmenterFn&& segmenter, const Image2D& image, const Mask2D& rs, int class_id,
                               const SessionOptions& options) {
    if (options.max_iters < 1) fail(ErrorCode::InvalidArgument, "max_iters must be >= 1");
    SessionResult result;
    result.clicks.push_back(options.deterministic_first_click ? centroid_click(rs, class_id, options.slice)
                                                              : first_click(rs, class_id, options.seed, options.slice));
    result.prediction = segmenter(image, result.clicks);
    for (int it = 1; it < options.max_iters; ++it) {
        try {
            result.clicks.push_back(next_click(result.prediction, rs, class_id, it, options.slice));
        } catch (const Error& e) {
            if (e.code() == ErrorCode::Converged) break;
            throw;
        }
        result.prediction = segmenter(image, result.clicks);
    }
    return result;
}

} // namespace memseg

#pragma once

// Whole-volume inference: click sessions on planned slices, memory-bank
// propagation through the rest, per-class streams fused by highest logit.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "memseg/error.hpp"
#include "memseg/metrics.hpp"
#include "memseg/model.hpp"
#include "memseg/prompts.hpp"
#include "memseg/report.hpp"
#include "memseg/volume.hpp"

namespace memseg {

struct PropagationStrategy {
    enum class Kind { All, EveryK };
    Kind kind = Kind::All;
    int k = 1;

    static PropagationStrategy all() { return {Kind::All, 1}; }
    static PropagationStrategy every(int k) {
        if (k < 1) fail(ErrorCode::InvalidArgument, "strategy stride must be >= 1");
        return {Kind::EveryK, k};
    }

    /// "all" or "every:K".
    static PropagationStrategy parse(const std::string& s) {
        if (s == "all") return all();
        if (s.rfind("every:", 0) == 0) {
            try {
                std::size_t used = 0;
                const int k = std::stoi(s.substr(6), &used);
                if (used == s.size() - 6) return every(k);
            } catch (const std::logic_error&) {
            }
        }
        fail(ErrorCode::InvalidArgument, "unknown strategy '" + s + "' (expected all or every:K)");
    }

    std::string to_string() const { return kind == Kind::All ? "all" : "every:" + std::to_string(k); }
    bool operator==(const PropagationStrategy&) const = default;
};

inline bool slice_has_class(const LabelMask& m, std::size_t z, int class_id) {
    const std::size_t n = m.geometry.slice_size();
    for (std::size_t i = 0; i < n; ++i)
        if (m.labels[z * n + i] == class_id) return true;
    return false;
}

/// ALL: every slice holding the structure. EVERY_K: the first such slice, then
/// every k-th slice after it that still holds the structure.
inline std::vector<std::size_t> plan_prompt_slices(const LabelMask& rs, int class_id, const PropagationStrategy& strategy) {
    std::vector<std::size_t> present;
    for (std::size_t z = 0; z < rs.geometry.dims[0]; ++z)
        if (slice_has_class(rs, z, class_id)) present.push_back(z);
    if (present.empty()) fail(ErrorCode::EmptyStructure, "class " + std::to_string(class_id) + " absent from prompt source");
    if (strategy.kind == PropagationStrategy::Kind::All) return present;
    if (strategy.k < 1) fail(ErrorCode::InvalidArgument, "strategy stride must be >= 1");
    std::vector<std::size_t> plan;
    for (std::size_t z : present)
        if ((z - present.front()) % static_cast<std::size_t>(strategy.k) == 0) plan.push_back(z);
    return plan;
}

/// Zero-mean, unit-variance intensities; constant volumes are only centred.
inline Volume normalize_intensity(const Volume& v) {
    Volume out = v;
    const double n = static_cast<double>(v.data.size());
    if (n == 0) return out;
    double mean = 0.0;
    for (double x : v.data) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : v.data) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / n);
    for (double& x : out.data) x = sd > 1e-12 ? (x - mean) / sd : x - mean;
    return out;
}

struct PropagationOptions {
    PropagationStrategy strategy;
    int clicks = 1; // session click budget per planned slice
    std::uint64_t seed = 0;
    bool deterministic_first_click = false;
    bool reverse = false; // add a descending pass, fused per class by max logit
    std::vector<int> classes; // empty: every foreground class of the model
};

struct ClassTrace {
    int class_id = 0;
    std::vector<std::size_t> prompted_slices;
    std::size_t clicks = 0;
    std::vector<ClickPrompt> click_log;
    std::vector<float> max_logit;           // per slice
    std::vector<std::size_t> positive_pixels; // per slice, before fusion
};

struct SegmentationResult {
    LabelMask mask;
    std::vector<ClassTrace> classes;
    double seconds = 0.0;

    std::size_t total_clicks() const {
        std::size_t n = 0;
        for (const auto& c : classes) n += c.clicks;
        return n;
    }
};

namespace detail {

struct SliceFeatures {
    Mat<float> tokens;
    Mat<float> pixels;
};

inline SliceFeatures slice_features(const Model<float>& model, const Image2D& img) {
    Tape<float> tape(false);
    Graph<float> g(model, tape);
    return {model.encode_image(g, img).value(), model.pixel_features(g, img).value()};
}

/// One class stream over the given slice order; returns per-slice logits.
inline std::vector<Mat<float>> run_stream(const Model<float>& model, const std::vector<Image2D>& slices,
                                          const std::vector<SliceFeatures>& features, const LabelMask& rs, int class_id,
                                          const std::vector<std::size_t>& order, const std::vector<bool>& planned,
                                          const PropagationOptions& opt, ClassTrace& trace) {
    std::vector<Mat<float>> logits(slices.size());
    MemoryBank<float> bank(model.config.memory_capacity);
    for (std::size_t z : order) {
        Tape<float> tape(false);
        Graph<float> g(model, tape);
        Var<float> x = g.constant(features[z].tokens);
        Var<float> pix = g.constant(features[z].pixels);
        Var<float> xm = model.memory_attend(g, x, bank, z);
        Var<float> out;
        if (planned[z]) {
            const Mask2D ref = extract_slice(rs, z, static_cast<std::uint8_t>(class_id));
            SessionOptions so;
            so.max_iters = opt.clicks;
            so.seed = Rng::derive(opt.seed, static_cast<std::uint64_t>(class_id), z);
            so.deterministic_first_click = opt.deterministic_first_click;
            so.slice = z;
            auto segmenter = [&](const Image2D&, const std::vector<ClickPrompt>& clicks) {
                out = model.decode_mask(g, xm, model.encode_prompts(g, clicks, class_id), pix);
                return threshold_logits(out.value(), slices[z].rows, slices[z].cols);
            };
            const SessionResult session = simulate_session(segmenter, slices[z], ref, class_id, so);
            trace.clicks += session.clicks.size();
            trace.click_log.insert(trace.click_log.end(), session.clicks.begin(), session.clicks.end());
        } else {
            out = model.decode_mask(g, xm, model.encode_prompts(g, {}, class_id), pix);
        }
        logits[z] = out.value();
        bank.push(model.encode_memory(g, x, out, z, planned[z]));
    }
    return logits;
}

} // namespace detail

/// Segments every slice of `image` (already at the model's slice size). Clicks
/// are simulated against `prompt_source`.
inline SegmentationResult propagate(const Model<float>& model, const Volume& image, const LabelMask& prompt_source,
                                    const PropagationOptions& opt) {
    const auto start = std::chrono::steady_clock::now();
    const ModelConfig& c = model.config;
    const Geometry& geo = image.geometry;
    if (geo.dims[1] != static_cast<std::size_t>(c.slice_size) || geo.dims[2] != static_cast<std::size_t>(c.slice_size))
        fail(ErrorCode::ConfigMismatch, "volume slices are " + std::to_string(geo.dims[1]) + "x" + std::to_string(geo.dims[2]) +
                                            ", checkpoint expects " + std::to_string(c.slice_size));
    if (!(prompt_source.geometry.dims == geo.dims)) fail(ErrorCode::DimensionError, "prompt source does not match volume");
    if (opt.clicks < 1) fail(ErrorCode::InvalidArgument, "clicks per prompted slice must be >= 1");
    if (static_cast<int>(prompt_source.class_count()) > c.num_classes)
        fail(ErrorCode::ConfigMismatch, "prompt source has more classes than the model");

    std::vector<int> classes = opt.classes;
    if (classes.empty())
        for (int k = 1; k < c.num_classes; ++k) classes.push_back(k);

    const Volume norm = normalize_intensity(image);
    const std::size_t depth = geo.dims[0], n = geo.slice_size();
    std::vector<Image2D> slices;
    std::vector<detail::SliceFeatures> features;
    for (std::size_t z = 0; z < depth; ++z) {
        slices.push_back(extract_slice(norm, z));
        features.push_back(detail::slice_features(model, slices.back()));
    }

    SegmentationResult result;
    result.mask = LabelMask(geo, prompt_source.class_names);
    std::vector<float> best(depth * n, 0.0f);
    for (int k : classes) {
        ClassTrace trace;
        trace.class_id = k;
        bool present = false;
        for (std::size_t z = 0; z < depth && !present; ++z) present = slice_has_class(prompt_source, z, k);
        if (!present) {
            trace.max_logit.assign(depth, -std::numeric_limits<float>::infinity());
            trace.positive_pixels.assign(depth, 0);
            result.classes.push_back(std::move(trace));
            continue;
        }
        trace.prompted_slices = plan_prompt_slices(prompt_source, k, opt.strategy);
        std::vector<bool> planned(depth, false);
        for (std::size_t z : trace.prompted_slices) planned[z] = true;
        std::vector<std::size_t> order(depth);
        for (std::size_t z = 0; z < depth; ++z) order[z] = z;
        auto logits = detail::run_stream(model, slices, features, prompt_source, k, order, planned, opt, trace);
        if (opt.reverse) {
            std::reverse(order.begin(), order.end());
            const auto back = detail::run_stream(model, slices, features, prompt_source, k, order, planned, opt, trace);
            for (std::size_t z = 0; z < depth; ++z) logits[z] = logits[z].cwiseMax(back[z]);
        }
        for (std::size_t z = 0; z < depth; ++z) {
            trace.max_logit.push_back(logits[z].maxCoeff());
            std::size_t pos = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const float v = logits[z](static_cast<Eigen::Index>(i), 0);
                if (v <= 0.0f) continue;
                ++pos;
                // a class wins a voxel when its probability exceeds 0.5 and its
                // logit beats every earlier class
                auto& label = result.mask.labels[z * n + i];
                if (label == 0 || v > best[z * n + i]) {
                    label = static_cast<std::uint8_t>(k);
                    best[z * n + i] = v;
                }
            }
            trace.positive_pixels.push_back(pos);
        }
        result.classes.push_back(std::move(trace));
    }
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

struct SweepCase {
    std::string id;
    const Volume* image = nullptr;
    const LabelMask* reference = nullptr;
};

struct SweepRow {
    std::string strategy;
    int clicks = 0;
    std::string class_name;
    int class_id = 0;
    double dsc = 0.0;
    double iou = 0.0;
    double clicks_used = 0.0; // mean per case
    std::size_t n = 0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    std::vector<MetricRecord> records; // per case, for aggregation and tests
};

/// Evaluates every (strategy, click budget) on every case; one row per class.
inline SweepResult sweep_strategies(const Model<float>& model, const std::vector<SweepCase>& cases,
                                    const std::vector<PropagationStrategy>& strategies, const std::vector<int>& budgets,
                                    std::uint64_t seed = 0, const std::string& model_name = "model",
                                    bool deterministic_first_click = false) {
    SweepResult out;
    for (const auto& s : strategies)
        for (int budget : budgets) {
            std::map<int, std::vector<double>> dsc_by, iou_by, clicks_by;
            std::map<int, std::string> names;
            for (const auto& cs : cases) {
                PropagationOptions opt;
                opt.strategy = s;
                opt.clicks = budget;
                opt.seed = seed;
                opt.deterministic_first_click = deterministic_first_click;
                const auto res = propagate(model, *cs.image, *cs.reference, opt);
                for (const auto& tr : res.classes) {
                    bool present = !tr.prompted_slices.empty();
                    if (!present) continue;
                    const auto k = static_cast<std::uint8_t>(tr.class_id);
                    const auto scores = score_class(res.mask, *cs.reference, k, cs.id);
                    const double d = scores.dsc, j = scores.iou;
                    const std::string name = static_cast<std::size_t>(k) < cs.reference->class_names.size()
                                                 ? cs.reference->class_names[k]
                                                 : "class_" + std::to_string(k);
                    names[tr.class_id] = name;
                    dsc_by[tr.class_id].push_back(d);
                    iou_by[tr.class_id].push_back(j);
                    clicks_by[tr.class_id].push_back(static_cast<double>(tr.clicks));
                    const std::string arm = model_name + "/" + s.to_string() + "/c" + std::to_string(budget);
                    out.records.push_back({"sweep", arm, name, "dsc", d, cs.id});
                    out.records.push_back({"sweep", arm, name, "iou", j, cs.id});
                }
            }
            auto mean = [](const std::vector<double>& v) {
                double m = 0.0;
                for (double x : v) m += x;
                return v.empty() ? 0.0 : m / static_cast<double>(v.size());
            };
            for (const auto& [k, d] : dsc_by)
                out.rows.push_back({s.to_string(), budget, names[k], k, mean(d), mean(iou_by[k]), mean(clicks_by[k]), d.size()});
        }
    return out;
}

} // namespace memseg

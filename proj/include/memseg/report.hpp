#pragma once

// Aggregation of per-volume scores into mean (std) tables, CSV emission and a
// self-contained HTML rendering with a green-to-red value ramp.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "memseg/error.hpp"
#include "memseg/stats.hpp"

namespace memseg {

struct MetricRecord {
    std::string dataset;
    std::string model;
    std::string class_name;
    std::string metric;
    double value = 0.0;
    std::string volume_id;
};

struct SummaryRow {
    std::string dataset;
    std::string model;
    std::string class_name;
    std::string metric;
    double mean = 0.0;
    double std = 0.0;
    std::size_t n = 0;
    std::string marker; // significance marker against the reference arm

    bool operator==(const SummaryRow&) const = default;
};

struct Grouping {
    bool by_dataset = true;
    bool by_model = true;
    bool by_class = true;
    bool all_row = true; // append an "All" row = mean over class rows
};

struct Summary {
    std::vector<SummaryRow> rows;
    std::vector<std::string> warnings;
};

inline const std::string kAllClassesRow = "All";

inline std::pair<double, double> mean_and_population_std(const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

inline Summary aggregate(const std::vector<MetricRecord>& records, const Grouping& grouping = {}) {
    using Key = std::tuple<std::string, std::string, std::string, std::string>;
    std::vector<Key> order;
    std::map<Key, std::vector<double>> groups;
    Summary summary;
    for (const auto& r : records) {
        Key key{grouping.by_dataset ? r.dataset : "*", grouping.by_model ? r.model : "*",
                grouping.by_class ? r.class_name : "*", r.metric};
        auto [it, inserted] = groups.try_emplace(key);
        if (inserted) order.push_back(key);
        if (std::isfinite(r.value))
            it->second.push_back(r.value);
        else
            summary.warnings.push_back("skipped unavailable " + r.metric + " for " + r.class_name + " in " + r.volume_id);
    }
    for (const auto& key : order) {
        const auto& values = groups[key];
        if (values.empty()) {
            summary.warnings.push_back("empty group omitted: " + std::get<0>(key) + "/" + std::get<1>(key) + "/" +
                                       std::get<2>(key) + "/" + std::get<3>(key));
            continue;
        }
        const auto [mean, sd] = mean_and_population_std(values);
        summary.rows.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), std::get<3>(key), mean, sd,
                                values.size(), ""});
    }
    if (grouping.all_row && grouping.by_class) {
        // class-weighted: each class row contributes its mean once
        std::vector<std::tuple<std::string, std::string, std::string>> all_order;
        std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> all_groups;
        for (const auto& row : summary.rows) {
            const auto k = std::make_tuple(row.dataset, row.model, row.metric);
            auto [it, inserted] = all_groups.try_emplace(k);
            if (inserted) all_order.push_back(k);
            it->second.push_back(row.mean);
        }
        for (const auto& k : all_order) {
            const auto [mean, sd] = mean_and_population_std(all_groups[k]);
            summary.rows.push_back({std::get<0>(k), std::get<1>(k), kAllClassesRow, std::get<2>(k), mean, sd,
                                    all_groups[k].size(), ""});
        }
    }
    return summary;
}

struct Comparison {
    std::string dataset;
    std::string class_name;
    std::string metric;
    std::string model;
    std::string reference;
    StatResult test;
};

/// Rank-sum test of every non-reference arm against `reference` on the
/// per-volume values of each (dataset, class, metric); sets the row markers.
/// "All" rows compare the per-volume class means.
inline std::vector<Comparison> mark_significance(Summary& summary, const std::vector<MetricRecord>& records,
                                                 const std::string& reference) {
    using Key = std::tuple<std::string, std::string, std::string, std::string>; // dataset, model, class, metric
    std::map<Key, std::vector<double>> values;
    std::map<Key, std::map<std::string, std::vector<double>>> per_volume;
    for (const auto& r : records) {
        if (!std::isfinite(r.value)) continue;
        values[{r.dataset, r.model, r.class_name, r.metric}].push_back(r.value);
        per_volume[{r.dataset, r.model, kAllClassesRow, r.metric}][r.volume_id].push_back(r.value);
    }
    for (auto& [key, vols] : per_volume) {
        auto& out = values[key];
        for (auto& [id, v] : vols) out.push_back(mean_and_population_std(v).first);
    }
    std::vector<Comparison> comparisons;
    for (auto& row : summary.rows) {
        if (row.model == reference) continue;
        const auto a = values.find({row.dataset, row.model, row.class_name, row.metric});
        const auto b = values.find({row.dataset, reference, row.class_name, row.metric});
        if (a == values.end() || b == values.end() || a->second.empty() || b->second.empty()) continue;
        const auto test = wilcoxon_ranksum(a->second, b->second);
        row.marker = significance_marker(test.p_value);
        comparisons.push_back({row.dataset, row.class_name, row.metric, row.model, reference, test});
    }
    return comparisons;
}

inline std::string format_exact(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string format_fixed3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

/// CSV with schema dataset,model,class,metric,mean,std,n (values at full precision).
inline std::string render_csv(const std::vector<SummaryRow>& rows) {
    std::ostringstream out;
    out << "dataset,model,class,metric,mean,std,n\n";
    for (const auto& r : rows)
        out << csv_escape(r.dataset) << ',' << csv_escape(r.model) << ',' << csv_escape(r.class_name) << ','
            << csv_escape(r.metric) << ',' << format_exact(r.mean) << ',' << format_exact(r.std) << ',' << r.n << '\n';
    return out.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

inline std::vector<SummaryRow> parse_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.rfind("dataset,model,class,metric,mean,std,n", 0) != 0)
        fail(ErrorCode::UnsupportedFormat, "summary CSV header missing");
    std::vector<SummaryRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 7) fail(ErrorCode::UnsupportedFormat, "summary CSV row needs 7 fields: " + line);
        try {
            rows.push_back({f[0], f[1], f[2], f[3], std::stod(f[4]), std::stod(f[5]),
                            static_cast<std::size_t>(std::stoull(f[6])), ""});
        } catch (const std::exception&) {
            fail(ErrorCode::UnsupportedFormat, "bad number in summary CSV row: " + line);
        }
    }
    return rows;
}

/// Presentation CSV: one row per (dataset, metric, class), one column per
/// model, cells "mean (std)" at three decimals followed by the marker.
inline std::string render_table_csv(const std::vector<SummaryRow>& rows) {
    std::vector<std::string> models;
    std::vector<std::tuple<std::string, std::string, std::string>> keys;
    for (const auto& r : rows) {
        if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
        const auto k = std::make_tuple(r.dataset, r.metric, r.class_name);
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
    std::ostringstream out;
    out << "dataset,metric,class";
    for (const auto& m : models) out << ',' << csv_escape(m);
    out << '\n';
    for (const auto& [dataset, metric, cls] : keys) {
        out << csv_escape(dataset) << ',' << csv_escape(metric) << ',' << csv_escape(cls);
        for (const auto& m : models) {
            out << ',';
            for (const auto& r : rows)
                if (r.dataset == dataset && r.metric == metric && r.class_name == cls && r.model == m) {
                    out << csv_escape(format_fixed3(r.mean) + " (" + format_fixed3(r.std) + ")" + r.marker);
                    break;
                }
        }
        out << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------- HTML

struct RampColor {
    std::string css_class;
    std::string hex;
};

/// Linear ramp over rank fraction t in [0,1]: 0 = dark red, 1 = dark green,
/// through orange and yellow.
inline RampColor ramp_color(double t) {
    struct Stop {
        double t;
        int r, g, b;
    };
    static constexpr Stop stops[] = {{0.0, 0x8b, 0x00, 0x00}, {1.0 / 3, 0xff, 0x8c, 0x00},
                                     {2.0 / 3, 0xff, 0xd7, 0x00}, {1.0, 0x00, 0x64, 0x00}};
    t = std::clamp(t, 0.0, 1.0);
    std::size_t seg = 0;
    while (seg + 2 < std::size(stops) && t > stops[seg + 1].t) ++seg;
    const Stop& a = stops[seg];
    const Stop& b = stops[seg + 1];
    const double u = (t - a.t) / (b.t - a.t);
    auto lerp = [&](int x, int y) { return static_cast<int>(std::lround(x + u * (y - x))); };
    char hex[8];
    std::snprintf(hex, sizeof(hex), "#%02x%02x%02x", lerp(a.r, b.r), lerp(a.g, b.g), lerp(a.b, b.b));
    std::string cls = t >= 0.75 ? "ramp-green" : t > 0.5 ? "ramp-yellow" : t == 0.5 ? "ramp-mid" : t > 0.25 ? "ramp-orange" : "ramp-red";
    return {cls, hex};
}

/// Rank fractions for a table: largest value -> 1, smallest -> 0, ties share
/// their mean rank; a single cell sits at the neutral midpoint 0.5.
inline std::vector<double> rank_fractions(const std::vector<double>& values, bool higher_is_better = true) {
    std::vector<double> t(values.size(), 0.5);
    if (values.size() < 2) return t;
    std::vector<std::size_t> idx(values.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return values[a] < values[b]; });
    const double denom = static_cast<double>(values.size() - 1);
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && values[idx[j + 1]] == values[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) / denom;
        for (std::size_t k = i; k <= j; ++k) t[idx[k]] = higher_is_better ? r : 1.0 - r;
        i = j + 1;
    }
    if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); }))
        std::fill(t.begin(), t.end(), 0.5);
    return t;
}

inline bool lower_is_better(const std::string& metric) {
    return metric.rfind("aae", 0) == 0 || metric.find("error") != std::string::npos;
}

inline std::string html_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

/// One table per (dataset, metric): class rows x model columns, cells
/// "mean (std)" at three decimals plus significance markers.
inline std::string render_html(const std::vector<SummaryRow>& rows, const std::string& title = "Segmentation report") {
    std::vector<std::pair<std::string, std::string>> tables;
    for (const auto& r : rows) {
        const auto key = std::make_pair(r.dataset, r.metric);
        if (std::find(tables.begin(), tables.end(), key) == tables.end()) tables.push_back(key);
    }
    std::ostringstream out;
    out << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" << html_escape(title) << "</title></head>\n"
        << "<body style=\"font-family:sans-serif\">\n<h1>" << html_escape(title) << "</h1>\n";
    for (const auto& [dataset, metric] : tables) {
        std::vector<std::string> models, classes;
        std::vector<const SummaryRow*> cells;
        for (const auto& r : rows) {
            if (r.dataset != dataset || r.metric != metric) continue;
            if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
            if (std::find(classes.begin(), classes.end(), r.class_name) == classes.end()) classes.push_back(r.class_name);
            cells.push_back(&r);
        }
        std::vector<double> means;
        for (const auto* c : cells) means.push_back(c->mean);
        const auto fractions = rank_fractions(means, !lower_is_better(metric));

        out << "<h2>" << html_escape(dataset) << " &mdash; " << html_escape(metric) << "</h2>\n"
            << "<table style=\"border-collapse:collapse\">\n<tr><th style=\"padding:4px 8px\">class</th>";
        for (const auto& m : models) out << "<th style=\"padding:4px 8px\">" << html_escape(m) << "</th>";
        out << "</tr>\n";
        for (const auto& cls : classes) {
            out << "<tr><td style=\"padding:4px 8px\">" << html_escape(cls) << "</td>";
            for (const auto& m : models) {
                const auto it = std::find_if(cells.begin(), cells.end(),
                                             [&](const SummaryRow* c) { return c->class_name == cls && c->model == m; });
                if (it == cells.end()) {
                    out << "<td></td>";
                    continue;
                }
                const auto color = ramp_color(fractions[static_cast<std::size_t>(it - cells.begin())]);
                out << "<td class=\"" << color.css_class << "\" style=\"padding:4px 8px;background:" << color.hex
                    << "\">" << format_fixed3((*it)->mean) << " (" << format_fixed3((*it)->std) << ")"
                    << html_escape((*it)->marker) << "</td>";
            }
            out << "</tr>\n";
        }
        out << "</table>\n";
    }
    out << "<p>All = class-weighted mean of the class rows. Significance (Wilcoxon rank-sum, two-sided): "
           "&dagger; p &lt; 0.05; &Dagger; p &lt; 1e-7. Thickness AAE compares per-volume mean thickness.</p>\n"
        << "</body></html>\n";
    return out.str();
}

} // namespace memseg

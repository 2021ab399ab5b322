#pragma once

// Wilcoxon rank-sum (Mann-Whitney) test: exact enumeration for small samples,
// tie- and continuity-corrected normal approximation otherwise.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "memseg/error.hpp"

namespace memseg {

enum class StatMethod { Exact, NormalApprox };

struct StatResult {
    double statistic = 0.0; // rank sum of the first sample
    double p_value = 1.0;
    StatMethod method = StatMethod::Exact;
    std::size_t n1 = 0;
    std::size_t n2 = 0;
};

inline std::string to_string(StatMethod m) { return m == StatMethod::Exact ? "exact" : "normal_approx"; }

constexpr std::size_t kExactRankSumLimit = 12;

/// Midranks (1-based) of the pooled sample.
inline std::vector<double> midranks(const std::vector<double>& pooled) {
    std::vector<std::size_t> idx(pooled.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return pooled[a] < pooled[b]; });
    std::vector<double> ranks(pooled.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && pooled[idx[j + 1]] == pooled[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

namespace detail {

inline void check_samples(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) fail(ErrorCode::InvalidArgument, "rank-sum test needs two non-empty samples");
    for (double v : a)
        if (!std::isfinite(v)) fail(ErrorCode::InvalidArgument, "non-finite sample value");
    for (double v : b)
        if (!std::isfinite(v)) fail(ErrorCode::InvalidArgument, "non-finite sample value");
}

inline bool all_identical(const std::vector<double>& a, const std::vector<double>& b) {
    const double v = a.front();
    return std::all_of(a.begin(), a.end(), [&](double x) { return x == v; }) &&
           std::all_of(b.begin(), b.end(), [&](double x) { return x == v; });
}

} // namespace detail

/// Exact two-sided p: the fraction of all C(n, n1) rank assignments whose rank
/// sum deviates from its null mean at least as far as the observed one.
/// Midranks are half-integers, so deviations are compared as exact integers.
inline StatResult wilcoxon_exact(const std::vector<double>& a, const std::vector<double>& b) {
    detail::check_samples(a, b);
    std::vector<double> pooled(a);
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto ranks = midranks(pooled);
    const std::size_t n1 = a.size(), n = pooled.size();
    if (n > 30) fail(ErrorCode::InvalidArgument, "exact enumeration limited to 30 observations");

    std::vector<long long> twice(n);
    for (std::size_t i = 0; i < n; ++i) twice[i] = std::llround(2.0 * ranks[i]);
    long long observed = 0;
    for (std::size_t i = 0; i < n1; ++i) observed += twice[i];
    // 2 * null mean rank sum = n1 (n + 1); compare |2W - n1(n+1)| as integers
    const long long mean2 = static_cast<long long>(n1 * (n + 1));
    const long long obs_dev = std::llabs(observed - mean2);

    StatResult result{static_cast<double>(observed) / 2.0, 1.0, StatMethod::Exact, a.size(), b.size()};
    if (detail::all_identical(a, b)) return result;

    long long extreme = 0, total = 0;
    std::vector<std::size_t> pick(n1);
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    while (true) {
        long long s = 0;
        for (auto i : pick) s += twice[i];
        ++total;
        if (std::llabs(s - mean2) >= obs_dev) ++extreme;
        // next combination in lexicographic order
        std::size_t k = n1;
        while (k > 0 && pick[k - 1] == n - n1 + k - 1) --k;
        if (k == 0) break;
        ++pick[k - 1];
        for (std::size_t j = k; j < n1; ++j) pick[j] = pick[j - 1] + 1;
    }
    result.p_value = static_cast<double>(extreme) / static_cast<double>(total);
    return result;
}

inline StatResult wilcoxon_normal(const std::vector<double>& a, const std::vector<double>& b) {
    detail::check_samples(a, b);
    std::vector<double> pooled(a);
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto ranks = midranks(pooled);
    const double n1 = static_cast<double>(a.size()), n2 = static_cast<double>(b.size()), n = n1 + n2;
    double w = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) w += ranks[i];

    StatResult result{w, 1.0, StatMethod::NormalApprox, a.size(), b.size()};
    if (detail::all_identical(a, b)) return result;

    std::vector<double> sorted(pooled);
    std::sort(sorted.begin(), sorted.end());
    double tie_term = 0.0;
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        i = j;
    }
    const double mean = n1 * (n + 1.0) / 2.0;
    const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if (!(var > 0.0)) return result;
    const double dev = std::max(0.0, std::abs(w - mean) - 0.5);
    result.p_value = std::min(1.0, std::erfc(dev / std::sqrt(2.0 * var)));
    return result;
}

/// Exact when n1 + n2 <= 12, normal approximation beyond.
inline StatResult wilcoxon_ranksum(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() + b.size() <= kExactRankSumLimit) return wilcoxon_exact(a, b);
    return wilcoxon_normal(a, b);
}

/// Table marker for a p-value: "‡" below 1e-7, "†" below 0.05.
inline std::string significance_marker(double p) {
    if (p < 1e-7) return "‡";
    if (p < 0.05) return "†";
    return "";
}

} // namespace memseg

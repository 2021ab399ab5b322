#pragma once

// Central finite-difference check of analytic gradients in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "memseg/error.hpp"
#include "memseg/model.hpp"
#include "memseg/rng.hpp"
#include "memseg/tensor.hpp"

namespace memseg {

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    std::string worst;
};

struct GradCheckOptions {
    double tolerance = 1e-5;
    double step = 1e-5;           // relative: h = step * max(1, |theta|)
    std::size_t max_elements = 0; // per parameter; 0 checks every element
    std::uint64_t seed = 0;
    double floor = 1e-4;          // denominator floor: parameters with ~zero gradient get an absolute bound
    // hook run on analytic gradients before comparison (negative controls)
    std::function<void(std::vector<Parameter<double>*>&)> tamper;
};

using LossBuilder = std::function<Var<double>(Tape<double>&)>;

/// `loss` must bind the parameters through `tape.param` and return a 1x1
/// value. The error of a parameter is max|a - n| / max(max|a|, max|n|, floor)
/// over its checked elements.
inline GradCheckReport grad_check(std::vector<Parameter<double>*> params, const LossBuilder& loss,
                                  const GradCheckOptions& opt = {}) {
    for (auto* p : params) p->zero_grad();
    {
        Tape<double> tape(true);
        tape.backward(loss(tape));
    }
    if (opt.tamper) opt.tamper(params);

    auto eval = [&]() {
        Tape<double> tape(false);
        return loss(tape).value()(0, 0);
    };

    GradCheckReport report;
    Rng rng(Rng::derive(opt.seed, 0x6C));
    for (auto* p : params) {
        const auto n = static_cast<std::size_t>(p->value.size());
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        if (opt.max_elements > 0 && n > opt.max_elements) {
            rng.shuffle(std::span<std::size_t>(idx));
            idx.resize(opt.max_elements);
        }
        double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
        for (std::size_t i : idx) {
            double& theta = p->value.data()[i];
            const double saved = theta;
            const double h = opt.step * std::max(1.0, std::abs(saved));
            theta = saved + h;
            const double lp = eval();
            theta = saved - h;
            const double lm = eval();
            theta = saved;
            const double numeric = (lp - lm) / (2.0 * h);
            const double analytic = p->grad.data()[i];
            max_diff = std::max(max_diff, std::abs(analytic - numeric));
            max_a = std::max(max_a, std::abs(analytic));
            max_n = std::max(max_n, std::abs(numeric));
        }
        GradCheckEntry e{p->name, max_diff / std::max({max_a, max_n, opt.floor}), idx.size()};
        if (report.worst.empty() || e.max_rel_error > report.max_rel_error) {
            report.max_rel_error = e.max_rel_error;
            report.worst = e.name;
        }
        report.entries.push_back(e);
    }
    for (const auto& e : report.entries)
        if (!(e.max_rel_error < opt.tolerance))
            fail(ErrorCode::GradCheckFailure, "gradient of " + e.name + " off by relative " + std::to_string(e.max_rel_error));
    return report;
}

/// Checks every parameter group of a double-precision model against a loss
/// assembled from the model's blocks.
inline GradCheckReport grad_check_model(Model<double>& model, const std::function<Var<double>(Graph<double>&)>& loss,
                                        const GradCheckOptions& opt = {}) {
    std::vector<Parameter<double>*> params;
    for (auto& p : model.params) params.push_back(&p);
    return grad_check(params, [&](Tape<double>& tape) {
        Graph<double> g(model, tape);
        return loss(g);
    }, opt);
}

} // namespace memseg

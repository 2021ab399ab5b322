#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "memseg/tensor.hpp"

namespace memseg {

struct AdamState {
    std::vector<Mat<float>> m;
    std::vector<Mat<float>> v;
    std::uint64_t step = 0;
};

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient. Moments are kept in single precision like the weights.
template <typename T>
void adam_step(std::vector<Parameter<T>>& params, AdamState& state, double lr, const AdamOptions& opt = {}) {
    if (state.m.size() != params.size()) {
        state.m.clear();
        state.v.clear();
        for (const auto& p : params) {
            state.m.push_back(Mat<float>::Zero(p.value.rows(), p.value.cols()));
            state.v.push_back(Mat<float>::Zero(p.value.rows(), p.value.cols()));
        }
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (p.grad.size() != p.value.size()) p.zero_grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (Eigen::Index k = 0; k < p.value.size(); ++k) {
            const double g = static_cast<double>(p.grad.data()[k]);
            const double mk = opt.beta1 * m.data()[k] + (1.0 - opt.beta1) * g;
            const double vk = opt.beta2 * v.data()[k] + (1.0 - opt.beta2) * g * g;
            m.data()[k] = static_cast<float>(mk);
            v.data()[k] = static_cast<float>(vk);
            const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + opt.eps);
            p.value.data()[k] = static_cast<T>(static_cast<double>(p.value.data()[k]) - update);
        }
    }
}

/// Reduce-on-plateau learning rate with early stopping, driven by a
/// validation score where higher is better.
struct PlateauSchedule {
    double lr = 1e-4;
    double lr_min = 1e-6;
    int plateau_epochs = 5;
    int early_stop = 10;

    double best = -1.0;
    int best_epoch = -1;
    int since_best = 0;  // epochs without improvement
    int since_change = 0; // epochs without improvement since the last halving
    int halvings = 0;

    /// Records one epoch's score; returns true when training should stop.
    bool update(double score, int epoch) {
        if (score > best) {
            best = score;
            best_epoch = epoch;
            since_best = 0;
            since_change = 0;
            return false;
        }
        ++since_best;
        ++since_change;
        if (since_change >= plateau_epochs) {
            const double next = std::max(lr_min, lr * 0.5);
            if (next < lr) ++halvings;
            lr = next;
            since_change = 0;
        }
        return since_best >= early_stop;
    }

    bool improved_at(int epoch) const { return best_epoch == epoch; }
};

} // namespace memseg

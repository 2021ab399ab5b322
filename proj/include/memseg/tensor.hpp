#pragma once

// Minimal reverse-mode autodiff over row-major Eigen matrices. Every value is
// a 2D matrix (tokens x channels, pixels x channels, or 1x1 scalars). Ops
// evaluate eagerly and, when the tape is recording, register a backward
// closure. Templated on the scalar so the same graph runs in float for
// training and in double for finite-difference checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "memseg/error.hpp"

namespace memseg {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Named trainable tensor; `grad` accumulates across backward passes until
/// zeroed by the optimizer.
template <typename T>
struct Parameter {
    std::string name;
    Mat<T> value;
    Mat<T> grad;

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Mat<T>& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    bool valid() const { return tape != nullptr && id >= 0; }
};

template <typename T>
class Tape {
public:
    struct Node {
        Mat<T> value;
        Mat<T> grad;
        std::function<void(Tape&)> backward;
        Parameter<T>* param = nullptr;
        bool needs_grad = false;
    };

    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }

    Var<T> constant(Mat<T> value) { return push(std::move(value), false); }

    Var<T> param(Parameter<T>& p) {
        Var<T> v = push(p.value, recording_);
        nodes_[static_cast<std::size_t>(v.id)].param = recording_ ? &p : nullptr;
        return v;
    }

    /// Records an op result; `backward` receives the tape and reads/writes
    /// node gradients by id.
    Var<T> op(Mat<T> value, std::initializer_list<Var<T>> inputs, std::function<void(Tape&)> backward) {
        return op(std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
    }

    Var<T> op(Mat<T> value, const std::vector<Var<T>>& inputs, std::function<void(Tape&)> backward) {
        bool needs = false;
        if (recording_)
            for (const auto& in : inputs) needs |= nodes_[static_cast<std::size_t>(in.id)].needs_grad;
        Var<T> v = push(std::move(value), needs);
        if (needs) nodes_[static_cast<std::size_t>(v.id)].backward = std::move(backward);
        return v;
    }

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    bool needs_grad(int id) const { return node(id).needs_grad; }

    /// Gradient buffer of node `id`, allocated (zeroed) on first touch.
    Mat<T>& grad(int id) {
        Node& n = node(id);
        if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    /// Seeds d(root)/d(root) = 1 (root must be 1x1 unless `seed` is given),
    /// runs closures in reverse order and accumulates into parameter grads.
    void backward(Var<T> root, const Mat<T>* seed = nullptr) {
        if (!recording_) fail(ErrorCode::InvalidArgument, "backward on a non-recording tape");
        if (!needs_grad(root.id)) return;
        if (seed) {
            grad(root.id) += *seed;
        } else {
            if (node(root.id).value.size() != 1) fail(ErrorCode::DimensionError, "backward root must be scalar");
            grad(root.id).array() += T(1);
        }
        for (int i = root.id; i >= 0; --i) {
            Node& n = node(i);
            if (!n.needs_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward(*this);
            if (n.param) {
                if (n.param->grad.size() == 0) n.param->zero_grad();
                n.param->grad += n.grad;
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    Var<T> push(Mat<T> value, bool needs) {
        nodes_.push_back(Node{std::move(value), Mat<T>(), nullptr, nullptr, needs});
        return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
    }

    std::vector<Node> nodes_;
    bool recording_;
};

template <typename T>
const Mat<T>& Var<T>::value() const {
    return tape->node(id).value;
}

namespace ops {

template <typename T>
void accumulate(Tape<T>& t, const Var<T>& v, const Mat<T>& g) {
    if (t.needs_grad(v.id)) t.grad(v.id) += g;
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    if (a.cols() != b.rows()) fail(ErrorCode::DimensionError, "matmul inner dimensions differ");
    Tape<T>& t = *a.tape;
    Mat<T> out = a.value() * b.value();
    return t.op(std::move(out), {a, b}, [a, b, id = t.size()](Tape<T>& tp) {
        const Mat<T>& g = tp.node(static_cast<int>(id)).grad;
        if (tp.needs_grad(a.id)) tp.grad(a.id).noalias() += g * b.value().transpose();
        if (tp.needs_grad(b.id)) tp.grad(b.id).noalias() += a.value().transpose() * g;
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) fail(ErrorCode::DimensionError, "add shapes differ");
    Tape<T>& t = *a.tape;
    Mat<T> out = a.value() + b.value();
    return t.op(std::move(out), {a, b}, [a, b, id = t.size()](Tape<T>& tp) {
        const Mat<T>& g = tp.node(static_cast<int>(id)).grad;
        accumulate(tp, a, g);
        accumulate(tp, b, g);
    });
}

/// a (n x m) + row vector b (1 x m) broadcast over rows.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> b) {
    if (b.rows() != 1 || b.cols() != a.cols()) fail(ErrorCode::DimensionError, "add_row expects a 1 x cols vector");
    Tape<T>& t = *a.tape;
    Mat<T> out = a.value().rowwise() + b.value().row(0);
    return t.op(std::move(out), {a, b}, [a, b, id = t.size()](Tape<T>& tp) {
        const Mat<T>& g = tp.node(static_cast<int>(id)).grad;
        accumulate(tp, a, g);
        if (tp.needs_grad(b.id)) tp.grad(b.id) += g.colwise().sum();
    });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    Tape<T>& t = *a.tape;
    Mat<T> out = a.value() * s;
    return t.op(std::move(out), {a}, [a, s, id = t.size()](Tape<T>& tp) {
        accumulate(tp, a, Mat<T>(tp.node(static_cast<int>(id)).grad * s));
    });
}

template <typename T>
Var<T> transpose(Var<T> a) {
    Tape<T>& t = *a.tape;
    Mat<T> out = a.value().transpose();
    return t.op(std::move(out), {a}, [a, id = t.size()](Tape<T>& tp) {
        accumulate(tp, a, Mat<T>(tp.node(static_cast<int>(id)).grad.transpose()));
    });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) fail(ErrorCode::DimensionError, "concat_rows of nothing");
    Tape<T>& t = *parts.front().tape;
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    for (const auto& p : parts) {
        if (p.cols() != cols) fail(ErrorCode::DimensionError, "concat_rows column counts differ");
        rows += p.rows();
    }
    Mat<T> out(rows, cols);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return t.op(std::move(out), parts, [parts, id = t.size()](Tape<T>& tp) {
        const Mat<T>& g = tp.node(static_cast<int>(id)).grad;
        Eigen::Index row = 0;
        for (const auto& p : parts) {
            if (tp.needs_grad(p.id)) tp.grad(p.id) += g.middleRows(row, p.rows());
            row += p.rows();
        }
    });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || start + count > a.rows()) fail(ErrorCode::DimensionError, "slice_rows out of range");
    Tape<T>& t = *a.tape;
    Mat<T> out = a.value().middleRows(start, count);
    return t.op(std::move(out), {a}, [a, start, count, id = t.size()](Tape<T>& tp) {
        if (tp.needs_grad(a.id)) tp.grad(a.id).middleRows(start, count) += tp.node(static_cast<int>(id)).grad;
    });
}

/// Rows of `table` selected by `indices` (embedding lookup).
template <typename T>
Var<T> gather_rows(Var<T> table, std::vector<int> indices) {
    Tape<T>& t = *table.tape;
    Mat<T> out(static_cast<Eigen::Index>(indices.size()), table.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || indices[i] >= table.rows()) fail(ErrorCode::DimensionError, "gather index out of range");
        out.row(static_cast<Eigen::Index>(i)) = table.value().row(indices[i]);
    }
    return t.op(std::move(out), {table}, [table, indices, id = t.size()](Tape<T>& tp) {
        if (!tp.needs_grad(table.id)) return;
        const Mat<T>& g = tp.node(static_cast<int>(id)).grad;
        Mat<T>& gt = tp.grad(table.id);
        for (std::size_t i = 0; i < indices.size(); ++i) gt.row(indices[i]) += g.row(static_cast<Eigen::Index>(i));
    });
}

template <typename T>
Var<T> sum_all(Var<T> a) {
    Tape<T>& t = *a.tape;
    Mat<T> out(1, 1);
    out(0, 0) = a.value().sum();
    return t.op(std::move(out), {a}, [a, id = t.size()](Tape<T>& tp) {
        if (tp.needs_grad(a.id)) tp.grad(a.id).array() += tp.node(static_cast<int>(id)).grad(0, 0);
    });
}

template <typename T>
Var<T> gelu(Var<T> a) {
    Tape<T>& t = *a.tape;
    static constexpr T c = T(0.7978845608028654); // sqrt(2/pi)
    static constexpr T k = T(0.044715);
    Mat<T> th = (c * (a.value().array() + k * a.value().array().cube())).tanh().matrix();
    Mat<T> out = (T(0.5) * a.value().array() * (T(1) + th.array())).matrix();
    return t.op(std::move(out), {a}, [a, th, id = t.size()](Tape<T>& tp) {
        if (!tp.needs_grad(a.id)) return;
        const auto x = a.value().array();
        const auto d = T(0.5) * (T(1) + th.array()) +
                       T(0.5) * x * (T(1) - th.array().square()) * c * (T(1) + T(3) * k * x.square());
        tp.grad(a.id).array() += tp.node(static_cast<int>(id)).grad.array() * d;
    });
}

template <typename T>
Var<T> tanh(Var<T> a) {
    Tape<T>& t = *a.tape;
    Mat<T> out = a.value().array().tanh().matrix();
    return t.op(out, {a}, [a, out, id = t.size()](Tape<T>& tp) {
        if (!tp.needs_grad(a.id))
            return;
        tp.grad(a.id).array() += tp.node(static_cast<int>(id)).grad.array() * (T(1) - out.array().square());
    });
}

template <typename T>
Mat<T> sigmoid_value(const Mat<T>& x) {
    // split by sign for stability
    Mat<T> out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const T v = x.data()[i];
        if (v >= T(0)) {
            out.data()[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out.data()[i] = e / (T(1) + e);
        }
    }
    return out;
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    Tape<T>& t = *a.tape;
    Mat<T> out = sigmoid_value(a.value());
    return t.op(out, {a}, [a, out, id = t.size()](Tape<T>& tp) {
        if (!tp.needs_grad(a.id)) return;
        tp.grad(a.id).array() += tp.node(static_cast<int>(id)).grad.array() * out.array() * (T(1) - out.array());
    });
}

/// Row-wise layer normalization with learned gain and bias (1 x cols each).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    Tape<T>& t = *x.tape;
    const Eigen::Index n = x.rows(), d = x.cols();
    Mat<T> xhat(n, d);
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const T mean = x.value().row(r).mean();
        const T var = (x.value().row(r).array() - mean).square().mean();
        inv_std(r) = T(1) / std::sqrt(var + eps);
        xhat.row(r) = (x.value().row(r).array() - mean) * inv_std(r);
    }
    Mat<T> out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
    out.rowwise() += beta.value().row(0);
    return t.op(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, id = t.size()](Tape<T>& tp) {
        const Mat<T>& g = tp.node(static_cast<int>(id)).grad;
        if (tp.needs_grad(gamma.id)) tp.grad(gamma.id) += (g.array() * xhat.array()).colwise().sum().matrix();
        if (tp.needs_grad(beta.id)) tp.grad(beta.id) += g.colwise().sum();
        if (!tp.needs_grad(x.id)) return;
        Mat<T> gx = (g.array().rowwise() * gamma.value().row(0).array()).matrix();
        Mat<T>& dx = tp.grad(x.id);
        for (Eigen::Index r = 0; r < gx.rows(); ++r) {
            const T m1 = gx.row(r).mean();
            const T m2 = (gx.row(r).array() * xhat.row(r).array()).mean();
            dx.row(r).array() += inv_std(r) * (gx.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
    });
}

/// Row-wise softmax, numerically stabilized.
template <typename T>
Mat<T> softmax_rows(const Mat<T>& s) {
    Mat<T> p(s.rows(), s.cols());
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const T m = s.row(r).maxCoeff();
        p.row(r) = (s.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

/// Multi-head scaled dot-product attention over already-projected Q (nq x d),
/// K, V (nk x d); heads split the channel axis. Returns nq x d.
template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, int heads, std::vector<Mat<T>>* probs_out = nullptr) {
    const Eigen::Index d = q.cols();
    if (heads <= 0 || d % heads != 0) fail(ErrorCode::DimensionError, "channels not divisible by heads");
    if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) fail(ErrorCode::DimensionError, "attention shapes");
    Tape<T>& t = *q.tape;
    const Eigen::Index dh = d / heads;
    const T s = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Mat<T>> probs(static_cast<std::size_t>(heads));
    Mat<T> out(q.rows(), d);
    for (int h = 0; h < heads; ++h) {
        const Mat<T> scores = (q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose()) * s;
        probs[static_cast<std::size_t>(h)] = softmax_rows<T>(scores);
        out.middleCols(h * dh, dh).noalias() = probs[static_cast<std::size_t>(h)] * v.value().middleCols(h * dh, dh);
    }
    if (probs_out) *probs_out = probs;
    return t.op(std::move(out), {q, k, v}, [q, k, v, heads, dh, s, probs = std::move(probs), id = t.size()](Tape<T>& tp) {
        const Mat<T>& g = tp.node(static_cast<int>(id)).grad;
        for (int h = 0; h < heads; ++h) {
            const Mat<T>& p = probs[static_cast<std::size_t>(h)];
            const auto go = g.middleCols(h * dh, dh);
            if (tp.needs_grad(v.id)) tp.grad(v.id).middleCols(h * dh, dh).noalias() += p.transpose() * go;
            if (!tp.needs_grad(q.id) && !tp.needs_grad(k.id)) continue;
            const Mat<T> dp = go * v.value().middleCols(h * dh, dh).transpose();
            Mat<T> ds = p.cwiseProduct(dp);
            const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = ds.rowwise().sum();
            ds -= (p.array().colwise() * rs.array()).matrix();
            ds *= s;
            if (tp.needs_grad(q.id)) tp.grad(q.id).middleCols(h * dh, dh).noalias() += ds * k.value().middleCols(h * dh, dh);
            if (tp.needs_grad(k.id)) tp.grad(k.id).middleCols(h * dh, dh).noalias() += ds.transpose() * q.value().middleCols(h * dh, dh);
        }
    });
}

/// Bilinear resize of a channel grid stored as (gh*gw) x c rows (row-major
/// grid order) to (oh*ow) x c, half-pixel centers, edge clamped.
template <typename T>
struct BilinearPlan {
    std::vector<std::array<Eigen::Index, 4>> src;
    std::vector<std::array<T, 4>> w;
    Eigen::Index in_rows = 0;

    BilinearPlan(int gh, int gw, int oh, int ow) : in_rows(static_cast<Eigen::Index>(gh) * gw) {
        src.resize(static_cast<std::size_t>(oh * ow));
        w.resize(src.size());
        auto axis = [](int o, int in, int out, int& lo, int& hi, T& frac) {
            T c = (static_cast<T>(o) + T(0.5)) * static_cast<T>(in) / static_cast<T>(out) - T(0.5);
            c = std::clamp(c, T(0), static_cast<T>(in - 1));
            lo = static_cast<int>(std::floor(c));
            hi = std::min(lo + 1, in - 1);
            frac = c - static_cast<T>(lo);
        };
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                int y0, y1, x0, x1;
                T fy, fx;
                axis(y, gh, oh, y0, y1, fy);
                axis(x, gw, ow, x0, x1, fx);
                const auto i = static_cast<std::size_t>(y * ow + x);
                src[i] = {static_cast<Eigen::Index>(y0 * gw + x0), static_cast<Eigen::Index>(y0 * gw + x1),
                          static_cast<Eigen::Index>(y1 * gw + x0), static_cast<Eigen::Index>(y1 * gw + x1)};
                w[i] = {(T(1) - fy) * (T(1) - fx), (T(1) - fy) * fx, fy * (T(1) - fx), fy * fx};
            }
    }
};

template <typename T>
Var<T> bilinear_resize(Var<T> grid, std::shared_ptr<const BilinearPlan<T>> plan) {
    if (grid.rows() != plan->in_rows) fail(ErrorCode::DimensionError, "bilinear input rows do not match plan");
    Tape<T>& t = *grid.tape;
    const Eigen::Index n = static_cast<Eigen::Index>(plan->src.size());
    const Eigen::Index c = grid.cols();
    Mat<T> out(n, c);
    const T* in = grid.value().data();
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& s = plan->src[static_cast<std::size_t>(i)];
        const auto& w = plan->w[static_cast<std::size_t>(i)];
        const T *a = in + s[0] * c, *b = in + s[1] * c, *d = in + s[2] * c, *e = in + s[3] * c;
        T* o = out.data() + i * c;
        for (Eigen::Index j = 0; j < c; ++j) o[j] = w[0] * a[j] + w[1] * b[j] + w[2] * d[j] + w[3] * e[j];
    }
    return t.op(std::move(out), {grid}, [grid, plan, id = t.size()](Tape<T>& tp) {
        if (!tp.needs_grad(grid.id)) return;
        const Mat<T>& g = tp.node(static_cast<int>(id)).grad;
        T* gi = tp.grad(grid.id).data();
        const Eigen::Index c = g.cols();
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
            const auto& s = plan->src[static_cast<std::size_t>(i)];
            const auto& w = plan->w[static_cast<std::size_t>(i)];
            const T* gr = g.data() + i * c;
            for (std::size_t k = 0; k < 4; ++k) {
                T* dst = gi + s[k] * c;
                for (Eigen::Index j = 0; j < c; ++j) dst[j] += w[k] * gr[j];
            }
        }
    });
}

/// Per-pixel logits from hypernetwork weights: out_i = sum_c u_ic f_ic + u_iC,
/// with u (n x (C+1)) and f (n x C).
template <typename T>
Var<T> hyper_logits(Var<T> u, Var<T> f) {
    const Eigen::Index c = f.cols();
    if (u.rows() != f.rows() || u.cols() != c + 1) fail(ErrorCode::DimensionError, "hyper_logits shapes");
    Tape<T>& t = *u.tape;
    const Eigen::Index n = u.rows();
    Mat<T> out(n, 1);
    const T *ud = u.value().data(), *fd = f.value().data();
    for (Eigen::Index i = 0; i < n; ++i) {
        const T* ur = ud + i * (c + 1);
        const T* fr = fd + i * c;
        T acc = ur[c];
        for (Eigen::Index j = 0; j < c; ++j) acc += ur[j] * fr[j];
        out(i, 0) = acc;
    }
    return t.op(std::move(out), {u, f}, [u, f, c, id = t.size()](Tape<T>& tp) {
        const Mat<T>& g = tp.node(static_cast<int>(id)).grad; // n x 1
        const Eigen::Index n = g.rows();
        if (tp.needs_grad(u.id)) {
            T* gu = tp.grad(u.id).data();
            const T* fd = f.value().data();
            for (Eigen::Index i = 0; i < n; ++i) {
                const T gi = g(i, 0);
                T* row = gu + i * (c + 1);
                for (Eigen::Index j = 0; j < c; ++j) row[j] += gi * fd[i * c + j];
                row[c] += gi;
            }
        }
        if (tp.needs_grad(f.id)) {
            T* gf = tp.grad(f.id).data();
            const T* ud = u.value().data();
            for (Eigen::Index i = 0; i < n; ++i) {
                const T gi = g(i, 0);
                for (Eigen::Index j = 0; j < c; ++j) gf[i * c + j] += gi * ud[i * (c + 1) + j];
            }
        }
    });
}

/// Average-pools an (s*s) x 1 pixel column into one row per patch token, each
/// row holding the (patch/pool)^2 pooled cells of that patch.
template <typename T>
Var<T> patch_pool(Var<T> pixels, int size, int patch, int pool) {
    if (pixels.rows() != static_cast<Eigen::Index>(size) * size || pixels.cols() != 1)
        fail(ErrorCode::DimensionError, "patch_pool expects an (s*s) x 1 column");
    if (size % patch != 0 || patch % pool != 0) fail(ErrorCode::DimensionError, "patch_pool divisibility");
    Tape<T>& t = *pixels.tape;
    const int grid = size / patch, cells = patch / pool;
    const T inv = T(1) / static_cast<T>(pool * pool);
    Mat<T> out = Mat<T>::Zero(grid * grid, cells * cells);
    const Mat<T>& in = pixels.value();
    auto index = [=](int y, int x, Eigen::Index& row, Eigen::Index& col) {
        row = (y / patch) * grid + (x / patch);
        col = ((y % patch) / pool) * cells + ((x % patch) / pool);
    };
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            Eigen::Index r, c;
            index(y, x, r, c);
            out(r, c) += inv * in(y * size + x, 0);
        }
    return t.op(std::move(out), {pixels}, [pixels, size, inv, index, id = t.size()](Tape<T>& tp) {
        if (!tp.needs_grad(pixels.id)) return;
        const Mat<T>& g = tp.node(static_cast<int>(id)).grad;
        Mat<T>& gp = tp.grad(pixels.id);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                Eigen::Index r, c;
                index(y, x, r, c);
                gp(y * size + x, 0) += inv * g(r, c);
            }
    });
}

/// Weighted binary cross-entropy (mean over pixels) plus soft Dice loss
/// 1 - (2 sum(pq) + eps) / (sum(p) + sum(q) + eps), p = sigmoid(logits).
template <typename T>
Var<T> bce_dice_loss(Var<T> logits, const Mat<T>& target, T pos_weight, T neg_weight, T eps = T(1)) {
    if (logits.rows() != target.rows() || logits.cols() != target.cols())
        fail(ErrorCode::DimensionError, "loss target shape differs from logits");
    Tape<T>& t = *logits.tape;
    const Mat<T>& z = logits.value();
    const Mat<T> p = sigmoid_value(z);
    const T n = static_cast<T>(z.size());
    T ce = 0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const T zi = z.data()[i], qi = target.data()[i];
        const T w = qi > T(0.5) ? pos_weight : neg_weight;
        ce += w * (std::max(zi, T(0)) - zi * qi + std::log1p(std::exp(-std::abs(zi))));
    }
    ce /= n;
    const T inter = (p.array() * target.array()).sum();
    const T denom = p.sum() + target.sum() + eps;
    const T dice = (T(2) * inter + eps) / denom;
    Mat<T> out(1, 1);
    out(0, 0) = ce + (T(1) - dice);
    return t.op(std::move(out), {logits}, [logits, target, p, n, inter, denom, eps, pos_weight, neg_weight,
                                           id = t.size()](Tape<T>& tp) {
        if (!tp.needs_grad(logits.id)) return;
        const T g = tp.node(static_cast<int>(id)).grad(0, 0);
        Mat<T>& gz = tp.grad(logits.id);
        const T num = T(2) * inter + eps;
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const T qi = target.data()[i], pi = p.data()[i];
            const T w = qi > T(0.5) ? pos_weight : neg_weight;
            const T dce = w * (pi - qi) / n;
            const T ddice_dp = -(T(2) * qi * denom - num) / (denom * denom);
            gz.data()[i] += g * (dce + ddice_dp * pi * (T(1) - pi));
        }
    });
}

} // namespace ops
} // namespace memseg

#pragma once

// Toy promptable segmentation network with a slice memory: patch encoder,
// click prompt encoder, memory encoder, memory cross-attention and a
// hypernetwork mask decoder. One structure is decoded per forward pass,
// selected by the class embedding carried in the prompt tokens.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "memseg/error.hpp"
#include "memseg/prompts.hpp"
#include "memseg/rng.hpp"
#include "memseg/tensor.hpp"
#include "memseg/volume.hpp"

namespace memseg {

struct ModelConfig {
    int slice_size = 64;
    int patch = 8;
    int embed_dim = 64;
    int heads = 4;
    int encoder_blocks = 2;
    int decoder_blocks = 1;
    int memory_capacity = 8;
    int num_classes = 5;
    int mlp_ratio = 2;
    int pixel_channels = 8;  // per-pixel feature maps mixed by the hypernetwork
    int mask_pool = 2;       // memory encoder pools mask probabilities in pool x pool cells
    int max_offset = 16;     // relative slice offsets beyond this share one embedding

    int grid() const { return slice_size / patch; }
    int tokens() const { return grid() * grid(); }
    int pool_cells() const { return (patch / mask_pool) * (patch / mask_pool); }

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v < 1) fail(ErrorCode::InvalidArgument, std::string("model.") + name + " must be >= 1");
        };
        positive(slice_size, "slice_size");
        positive(patch, "patch");
        positive(embed_dim, "embed_dim");
        positive(heads, "heads");
        positive(encoder_blocks, "encoder_blocks");
        positive(decoder_blocks, "decoder_blocks");
        positive(memory_capacity, "memory_capacity");
        positive(mlp_ratio, "mlp_ratio");
        positive(pixel_channels, "pixel_channels");
        positive(mask_pool, "mask_pool");
        positive(max_offset, "max_offset");
        if (num_classes < 2) fail(ErrorCode::InvalidArgument, "model.num_classes must be >= 2");
        if (slice_size % patch != 0) fail(ErrorCode::InvalidArgument, "model.slice_size must be divisible by patch");
        if (embed_dim % heads != 0) fail(ErrorCode::InvalidArgument, "model.embed_dim must be divisible by heads");
        if (embed_dim % 4 != 0) fail(ErrorCode::InvalidArgument, "model.embed_dim must be divisible by 4");
        if (patch % mask_pool != 0) fail(ErrorCode::InvalidArgument, "model.patch must be divisible by mask_pool");
    }

    bool operator==(const ModelConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, slice_size, patch, embed_dim, heads, encoder_blocks,
                                                decoder_blocks, memory_capacity, num_classes, mlp_ratio,
                                                pixel_channels, mask_pool, max_offset)

/// 2D sinusoidal encoding of a continuous (row, col) position in token units.
/// The first half of the channels encodes the row, the second half the column.
template <typename T>
void sinusoid_2d(T row, T col, int dim, T* out) {
    const int nf = dim / 4;
    for (int k = 0; k < nf; ++k) {
        const T w = T(std::numbers::pi) * std::pow(T(2), -T(6) * static_cast<T>(k) / static_cast<T>(nf));
        out[k] = std::sin(w * row);
        out[nf + k] = std::cos(w * row);
        out[2 * nf + k] = std::sin(w * col);
        out[3 * nf + k] = std::cos(w * col);
    }
}

template <typename T>
Mat<T> grid_positional_encoding(const ModelConfig& c) {
    Mat<T> pe(c.tokens(), c.embed_dim);
    for (int i = 0; i < c.grid(); ++i)
        for (int j = 0; j < c.grid(); ++j)
            sinusoid_2d<T>(static_cast<T>(i), static_cast<T>(j), c.embed_dim, pe.row(i * c.grid() + j).data());
    return pe;
}

/// Non-overlapping patches as rows (T x patch^2), patch pixels row-major.
template <typename T>
Mat<T> image_patches(const Image2D& img, const ModelConfig& c) {
    const auto s = static_cast<std::size_t>(c.slice_size);
    if (img.rows != s || img.cols != s)
        fail(ErrorCode::DimensionError, "slice is " + std::to_string(img.rows) + "x" + std::to_string(img.cols) +
                                            ", model expects " + std::to_string(s) + "x" + std::to_string(s));
    const int p = c.patch, g = c.grid();
    Mat<T> out(c.tokens(), p * p);
    for (int y = 0; y < c.slice_size; ++y)
        for (int x = 0; x < c.slice_size; ++x)
            out((y / p) * g + x / p, (y % p) * p + x % p) = static_cast<T>(img(static_cast<std::size_t>(y), static_cast<std::size_t>(x)));
    return out;
}

/// 3x3 zero-padded neighbourhoods as rows (S^2 x 9).
template <typename T>
Mat<T> image_im2col(const Image2D& img) {
    const auto rows = static_cast<long>(img.rows), cols = static_cast<long>(img.cols);
    Mat<T> out = Mat<T>::Zero(rows * cols, 9);
    for (long y = 0; y < rows; ++y)
        for (long x = 0; x < cols; ++x)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const long yy = y + dy, xx = x + dx;
                    if (yy < 0 || xx < 0 || yy >= rows || xx >= cols) continue;
                    out(y * cols + x, (dy + 1) * 3 + dx + 1) =
                        static_cast<T>(img(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)));
                }
    return out;
}

template <typename T>
struct MemoryEntry {
    Mat<T> tokens;
    std::size_t slice_index = 0;
    bool prompted = false;
    // tokens as a node of the tape that produced them (training); invalid at inference
    Var<T> node;
    // projections through the memory key/value weights, computed on first use
    Var<T> key_node, value_node;
    Mat<T> key_cache, value_cache;
};

/// Bounded entry list. On overflow the oldest unprompted entry is evicted; if
/// every entry is prompted the oldest prompted one goes.
template <typename T>
class MemoryBank {
public:
    explicit MemoryBank(int capacity = 8) : capacity_(capacity) {
        if (capacity < 1) fail(ErrorCode::InvalidArgument, "memory capacity must be >= 1");
    }

    void push(MemoryEntry<T> entry) {
        entries_.push_back(std::move(entry));
        if (static_cast<int>(entries_.size()) <= capacity_) return;
        auto victim = entries_.begin();
        for (auto it = entries_.begin(); it != entries_.end(); ++it)
            if (!it->prompted) {
                victim = it;
                break;
            }
        entries_.erase(victim);
    }

    void clear() { entries_.clear(); }
    bool empty() const { return entries_.empty(); }
    std::size_t size() const { return entries_.size(); }
    int capacity() const { return capacity_; }
    std::vector<MemoryEntry<T>>& entries() { return entries_; }
    const std::vector<MemoryEntry<T>>& entries() const { return entries_; }

private:
    int capacity_;
    std::vector<MemoryEntry<T>> entries_;
};

template <typename T>
MemoryBank<T> bank_push(MemoryBank<T> bank, MemoryEntry<T> entry) {
    bank.push(std::move(entry));
    return bank;
}

struct LinearRef {
    int w = -1, b = -1;
};
struct NormRef {
    int g = -1, b = -1;
};
struct AttentionRef {
    LinearRef q, k, v, o;
};
struct EncoderBlockRef {
    NormRef ln1, ln2;
    AttentionRef attn;
    LinearRef fc1, fc2;
};
struct DecoderBlockRef {
    AttentionRef to_image, to_prompts;
    NormRef ln1, ln2, ln3;
    LinearRef fc1, fc2;
};

template <typename T>
class Model;

/// Binds model parameters to one tape; every forward helper runs through it.
template <typename T>
class Graph {
public:
    Graph(const Model<T>& model, Tape<T>& tape)
        : model_(model), tape_(tape), bound_(model.params.size()) {}

    Tape<T>& tape() { return tape_; }
    const Model<T>& model() const { return model_; }

    Var<T> p(int index) {
        auto& slot = bound_[static_cast<std::size_t>(index)];
        if (!slot.valid()) slot = tape_.param(const_cast<Parameter<T>&>(model_.params[static_cast<std::size_t>(index)]));
        return slot;
    }

    Var<T> constant(Mat<T> m) { return tape_.constant(std::move(m)); }

    Var<T> linear(Var<T> x, const LinearRef& l) { return ops::add_row(ops::matmul(x, p(l.w)), p(l.b)); }
    Var<T> norm(Var<T> x, const NormRef& n) { return ops::layer_norm(x, p(n.g), p(n.b)); }

    Var<T> attention(Var<T> q_in, Var<T> k_in, Var<T> v_in, const AttentionRef& a) {
        Var<T> q = linear(q_in, a.q), k = linear(k_in, a.k), v = linear(v_in, a.v);
        return linear(ops::multi_head_attention(q, k, v, model_.config.heads), a.o);
    }

private:
    const Model<T>& model_;
    Tape<T>& tape_;
    std::vector<Var<T>> bound_;
};

template <typename T>
class Model {
public:
    ModelConfig config;
    std::vector<Parameter<T>> params;

    LinearRef patch_embed_ref;
    std::vector<EncoderBlockRef> encoder;
    NormRef encoder_norm;
    AttentionRef memory_attention;
    NormRef memory_norm;
    int offset_table = -1;
    int flag_table = -1;
    LinearRef memory_proj;
    NormRef memory_encoder_norm;
    int polarity_table = -1;
    int class_table = -1;
    int no_prompt = -1;
    int mask_token = -1;
    std::vector<DecoderBlockRef> decoder;
    LinearRef hyper_tokens, hyper_global, pixel_conv;

    Mat<T> positional;

    explicit Model(const ModelConfig& c, std::uint64_t seed = 0) : config(c) {
        config.validate();
        build();
        initialize(seed);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params) n += static_cast<std::size_t>(p.value.size());
        return n;
    }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    void zero_grad() {
        for (auto& p : params) p.zero_grad();
    }

    /// Re-initializes every parameter deterministically from `seed`.
    void initialize(std::uint64_t seed) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            Rng rng(Rng::derive(seed, i, 0x1417));
            const auto kind = init_[i];
            for (Eigen::Index k = 0; k < p.value.size(); ++k) {
                T v = 0;
                switch (kind.first) {
                case Init::Zero: v = 0; break;
                case Init::One: v = 1; break;
                case Init::Xavier: {
                    const double lim = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
                    v = static_cast<T>(rng.uniform(-lim, lim));
                    break;
                }
                case Init::Normal: v = static_cast<T>(kind.second * rng.normal()); break;
                }
                p.value.data()[k] = v;
            }
            p.zero_grad();
        }
    }

    // ---------------------------------------------------------------- blocks

    /// Patch tokens (T x D): flattened patches through a linear projection plus
    /// the fixed sinusoidal grid encoding.
    Var<T> patch_embed(Graph<T>& g, const Image2D& img) const {
        Var<T> x = g.linear(g.constant(image_patches<T>(img, config)), patch_embed_ref);
        return ops::add(x, g.constant(positional));
    }

    Var<T> encode_image(Graph<T>& g, const Image2D& img) const {
        Var<T> x = patch_embed(g, img);
        for (const auto& b : encoder) {
            Var<T> h = g.norm(x, b.ln1);
            x = ops::add(x, g.attention(h, h, h, b.attn));
            h = g.norm(x, b.ln2);
            x = ops::add(x, g.linear(ops::gelu(g.linear(h, b.fc1)), b.fc2));
        }
        return g.norm(x, encoder_norm);
    }

    /// Local intensity features (S^2 x pixel_channels) for the decoder.
    Var<T> pixel_features(Graph<T>& g, const Image2D& img) const {
        return ops::tanh(g.linear(g.constant(image_im2col<T>(img)), pixel_conv));
    }

    Var<T> encode_prompts(Graph<T>& g, const std::vector<ClickPrompt>& clicks, int class_id) const {
        if (class_id < 1 || class_id >= config.num_classes)
            fail(ErrorCode::InvalidArgument, "class id " + std::to_string(class_id) + " outside model classes");
        const int d = config.embed_dim;
        Var<T> cls = ops::gather_rows(g.p(class_table), {class_id});
        if (clicks.empty()) return ops::add(g.p(no_prompt), cls);
        Mat<T> pe(static_cast<Eigen::Index>(clicks.size()), d);
        std::vector<int> pol, classes(clicks.size(), class_id);
        for (std::size_t i = 0; i < clicks.size(); ++i) {
            const auto& c = clicks[i];
            const auto s = static_cast<std::size_t>(config.slice_size);
            if (c.row >= s || c.col >= s)
                fail(ErrorCode::CoordinateError, "click (" + std::to_string(c.row) + "," + std::to_string(c.col) +
                                                     ") outside " + std::to_string(s) + "x" + std::to_string(s) + " slice");
            const T u = (static_cast<T>(c.row) + T(0.5)) / static_cast<T>(config.patch) - T(0.5);
            const T v = (static_cast<T>(c.col) + T(0.5)) / static_cast<T>(config.patch) - T(0.5);
            sinusoid_2d<T>(u, v, d, pe.row(static_cast<Eigen::Index>(i)).data());
            pol.push_back(c.polarity == Polarity::Positive ? 1 : 0);
        }
        Var<T> tok = ops::add(g.constant(std::move(pe)), ops::gather_rows(g.p(polarity_table), pol));
        return ops::add(tok, ops::gather_rows(g.p(class_table), classes));
    }

    int offset_index(std::size_t current, std::size_t entry) const {
        const long diff = static_cast<long>(current) - static_cast<long>(entry);
        return static_cast<int>(std::clamp<long>(diff, -config.max_offset, config.max_offset) + config.max_offset);
    }

    /// Cross-attention from the current tokens to every bank entry, followed
    /// by residual add and normalization. Empty bank: identity.
    Var<T> memory_attend(Graph<T>& g, Var<T> x, MemoryBank<T>& bank, std::size_t slice_index) const {
        if (bank.empty()) return x;
        const auto& a = memory_attention;
        std::vector<Var<T>> keys, values;
        for (auto& e : bank.entries()) {
            Var<T> kp, vp;
            if (e.node.valid() && e.node.tape == &g.tape()) {
                if (!e.key_node.valid() || e.key_node.tape != &g.tape()) {
                    e.key_node = ops::matmul(e.node, g.p(a.k.w));
                    e.value_node = ops::matmul(e.node, g.p(a.v.w));
                }
                kp = e.key_node;
                vp = e.value_node;
            } else {
                if (e.key_cache.size() == 0) {
                    e.key_cache = e.tokens * params[static_cast<std::size_t>(a.k.w)].value;
                    e.value_cache = e.tokens * params[static_cast<std::size_t>(a.v.w)].value;
                }
                kp = g.constant(e.key_cache);
                vp = g.constant(e.value_cache);
            }
            Var<T> aug = ops::add(ops::gather_rows(g.p(offset_table), {offset_index(slice_index, e.slice_index)}),
                                  ops::gather_rows(g.p(flag_table), {e.prompted ? 1 : 0}));
            keys.push_back(ops::add_row(kp, ops::add(ops::matmul(aug, g.p(a.k.w)), g.p(a.k.b))));
            values.push_back(ops::add_row(vp, ops::add(ops::matmul(aug, g.p(a.v.w)), g.p(a.v.b))));
        }
        Var<T> q = g.linear(x, a.q);
        Var<T> att = ops::multi_head_attention(q, ops::concat_rows(keys), ops::concat_rows(values), config.heads);
        return g.norm(ops::add(x, g.linear(att, a.o)), memory_norm);
    }

    /// Mask logits as an (S^2 x 1) column, row-major over the slice.
    Var<T> decode_mask(Graph<T>& g, Var<T> x, Var<T> prompts, Var<T> pixels) const {
        Var<T> seq = ops::concat_rows(std::vector<Var<T>>{g.p(mask_token), prompts});
        Var<T> pe = g.constant(positional);
        for (const auto& b : decoder) {
            Var<T> xk = ops::add(x, pe);
            seq = g.norm(ops::add(seq, g.attention(seq, xk, x, b.to_image)), b.ln1);
            x = g.norm(ops::add(x, g.attention(xk, seq, seq, b.to_prompts)), b.ln2);
            x = g.norm(ops::add(x, g.linear(ops::gelu(g.linear(x, b.fc1)), b.fc2)), b.ln3);
        }
        Var<T> hyper = ops::add_row(g.linear(x, hyper_tokens), g.linear(ops::slice_rows(seq, 0, 1), hyper_global));
        Var<T> up = ops::bilinear_resize(hyper, upsample_plan());
        return ops::hyper_logits(up, pixels);
    }

    /// Memory entry: mask probabilities pooled per token, projected, added to
    /// the image tokens and normalized.
    MemoryEntry<T> encode_memory(Graph<T>& g, Var<T> x, Var<T> logits, std::size_t slice_index, bool prompted) const {
        Var<T> pooled = ops::patch_pool(ops::sigmoid(logits), config.slice_size, config.patch, config.mask_pool);
        Var<T> tok = g.norm(ops::add(x, g.linear(pooled, memory_proj)), memory_encoder_norm);
        MemoryEntry<T> e;
        e.tokens = tok.value();
        e.slice_index = slice_index;
        e.prompted = prompted;
        if (g.tape().recording()) e.node = tok;
        return e;
    }

    std::shared_ptr<const ops::BilinearPlan<T>> upsample_plan() const {
        if (!plan_)
            plan_ = std::make_shared<ops::BilinearPlan<T>>(config.grid(), config.grid(), config.slice_size,
                                                           config.slice_size);
        return plan_;
    }

private:
    enum class Init { Zero, One, Xavier, Normal };

    int add_param(const std::string& name, int rows, int cols, Init init, double scale = 0.0) {
        Parameter<T> p;
        p.name = name;
        p.value = Mat<T>::Zero(rows, cols);
        p.grad = Mat<T>::Zero(rows, cols);
        params.push_back(std::move(p));
        init_.emplace_back(init, scale);
        const int idx = static_cast<int>(params.size() - 1);
        index_[name] = idx;
        return idx;
    }

    LinearRef add_linear(const std::string& name, int in, int out) {
        return {add_param(name + ".weight", in, out, Init::Xavier), add_param(name + ".bias", 1, out, Init::Zero)};
    }
    NormRef add_norm(const std::string& name, int dim) {
        return {add_param(name + ".gain", 1, dim, Init::One), add_param(name + ".bias", 1, dim, Init::Zero)};
    }
    AttentionRef add_attention(const std::string& name, int dim) {
        return {add_linear(name + ".q", dim, dim), add_linear(name + ".k", dim, dim), add_linear(name + ".v", dim, dim),
                add_linear(name + ".out", dim, dim)};
    }

    void build() {
        const ModelConfig& c = config;
        const int d = c.embed_dim, hidden = c.mlp_ratio * c.embed_dim;
        patch_embed_ref = add_linear("patch_embed", c.patch * c.patch, d);
        for (int i = 0; i < c.encoder_blocks; ++i) {
            const std::string n = "encoder." + std::to_string(i);
            EncoderBlockRef b;
            b.ln1 = add_norm(n + ".norm1", d);
            b.attn = add_attention(n + ".attn", d);
            b.ln2 = add_norm(n + ".norm2", d);
            b.fc1 = add_linear(n + ".fc1", d, hidden);
            b.fc2 = add_linear(n + ".fc2", hidden, d);
            encoder.push_back(b);
        }
        encoder_norm = add_norm("encoder.norm", d);
        memory_attention = add_attention("memory.attn", d);
        memory_norm = add_norm("memory.norm", d);
        offset_table = add_param("memory.offset_embed", 2 * c.max_offset + 1, d, Init::Normal, 0.1);
        flag_table = add_param("memory.prompted_embed", 2, d, Init::Normal, 0.1);
        memory_proj = add_linear("memory_encoder.proj", c.pool_cells(), d);
        memory_encoder_norm = add_norm("memory_encoder.norm", d);
        polarity_table = add_param("prompt.polarity_embed", 2, d, Init::Normal, 0.5);
        class_table = add_param("prompt.class_embed", c.num_classes, d, Init::Normal, 0.5);
        no_prompt = add_param("prompt.no_prompt", 1, d, Init::Normal, 0.5);
        mask_token = add_param("decoder.mask_token", 1, d, Init::Normal, 0.5);
        for (int i = 0; i < c.decoder_blocks; ++i) {
            const std::string n = "decoder." + std::to_string(i);
            DecoderBlockRef b;
            b.to_image = add_attention(n + ".to_image", d);
            b.ln1 = add_norm(n + ".norm1", d);
            b.to_prompts = add_attention(n + ".to_prompts", d);
            b.ln2 = add_norm(n + ".norm2", d);
            b.fc1 = add_linear(n + ".fc1", d, hidden);
            b.fc2 = add_linear(n + ".fc2", hidden, d);
            b.ln3 = add_norm(n + ".norm3", d);
            decoder.push_back(b);
        }
        hyper_tokens = add_linear("decoder.hyper", d, c.pixel_channels + 1);
        hyper_global = add_linear("decoder.hyper_global", d, c.pixel_channels + 1);
        pixel_conv = add_linear("decoder.pixel_conv", 9, c.pixel_channels);
        positional = grid_positional_encoding<T>(c);
    }

    std::vector<std::pair<Init, double>> init_;
    std::map<std::string, int> index_;
    mutable std::shared_ptr<const ops::BilinearPlan<T>> plan_;
};

/// Copies parameter values between scalar types (float training <-> double checks).
template <typename To, typename From>
void copy_parameters(Model<To>& dst, const Model<From>& src) {
    if (!(dst.config == src.config)) fail(ErrorCode::ConfigMismatch, "model configs differ");
    for (std::size_t i = 0; i < dst.params.size(); ++i) dst.params[i].value = src.params[i].value.template cast<To>();
}

/// Per-class loss weights: w_pos = 0.5/f, w_neg = 0.5/(1-f) for foreground
/// fraction f, each capped at `cap`. Index 0 (background) is unused.
struct ClassWeights {
    std::vector<double> pos;
    std::vector<double> neg;

    static ClassWeights uniform(int num_classes) {
        return {std::vector<double>(static_cast<std::size_t>(num_classes), 1.0),
                std::vector<double>(static_cast<std::size_t>(num_classes), 1.0)};
    }
};

inline void to_json(nlohmann::json& j, const ClassWeights& w) { j = {{"pos", w.pos}, {"neg", w.neg}}; }
inline void from_json(const nlohmann::json& j, ClassWeights& w) {
    j.at("pos").get_to(w.pos);
    j.at("neg").get_to(w.neg);
}

inline ClassWeights inverse_frequency_weights(const std::vector<const LabelMask*>& masks, int num_classes, double cap) {
    std::vector<double> count(static_cast<std::size_t>(num_classes), 0.0);
    double total = 0.0;
    for (const auto* m : masks) {
        for (auto v : m->labels)
            if (v < num_classes) count[v] += 1.0;
        total += static_cast<double>(m->labels.size());
    }
    ClassWeights w = ClassWeights::uniform(num_classes);
    if (total == 0.0) return w;
    for (int k = 1; k < num_classes; ++k) {
        const double f = count[static_cast<std::size_t>(k)] / total;
        if (f <= 0.0 || f >= 1.0) continue;
        w.pos[static_cast<std::size_t>(k)] = std::min(cap, 0.5 / f);
        w.neg[static_cast<std::size_t>(k)] = std::min(cap, 0.5 / (1.0 - f));
    }
    return w;
}

/// Binary target column (S^2 x 1) for one class of a multi-class label slice.
template <typename T>
Mat<T> class_target(const Mask2D& labels, int class_id) {
    Mat<T> t(static_cast<Eigen::Index>(labels.size()), 1);
    for (std::size_t i = 0; i < labels.size(); ++i) t(static_cast<Eigen::Index>(i), 0) = labels.values[i] == class_id ? T(1) : T(0);
    return t;
}

template <typename T>
Mask2D threshold_logits(const Mat<T>& logits, std::size_t rows, std::size_t cols) {
    Mask2D m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.values[i] = logits(static_cast<Eigen::Index>(i), 0) > T(0) ? 1 : 0;
    return m;
}

} // namespace memseg

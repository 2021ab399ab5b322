#pragma once

// Checkpoint file: "MSEGCKPT", u32 version, u64 header length, JSON header,
// then little-endian f32 payloads addressed by element offset.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "memseg/error.hpp"
#include "memseg/model.hpp"
#include "memseg/optim.hpp"

namespace memseg {

inline constexpr char kCheckpointMagic[8] = {'M', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Mat<float> value;
};

struct Checkpoint {
    ModelConfig config;
    std::vector<NamedTensor> tensors;
    AdamState adam;
    int epoch = 0;
    double best_val_dsc = -1.0;
    nlohmann::json extra = nlohmann::json::object(); // schedule, loss weights, training config
};

inline Checkpoint make_checkpoint(const Model<float>& model, const AdamState& adam, int epoch, double best,
                                  nlohmann::json extra = nlohmann::json::object()) {
    Checkpoint c;
    c.config = model.config;
    for (const auto& p : model.params) c.tensors.push_back({p.name, p.value});
    c.adam = adam;
    c.epoch = epoch;
    c.best_val_dsc = best;
    c.extra = std::move(extra);
    return c;
}

namespace detail {

inline void append_floats(std::string& out, const Mat<float>& m) {
    const std::size_t start = out.size();
    out.resize(start + static_cast<std::size_t>(m.size()) * 4);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, m.data() + i, 4);
        for (int b = 0; b < 4; ++b)
            out[start + static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
}

inline Mat<float> read_floats(const std::string& payload, std::size_t offset, Eigen::Index rows, Eigen::Index cols) {
    const std::size_t n = static_cast<std::size_t>(rows * cols);
    if ((offset + n) * 4 > payload.size()) fail(ErrorCode::CorruptData, "checkpoint payload truncated");
    Mat<float> m(rows, cols);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
            bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[(offset + i) * 4 + static_cast<std::size_t>(b)])) << (8 * b);
        std::memcpy(m.data() + static_cast<Eigen::Index>(i), &bits, 4);
    }
    return m;
}

} // namespace detail

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    nlohmann::json header;
    header["model"] = c.config;
    header["epoch"] = c.epoch;
    header["best_val_dsc"] = c.best_val_dsc;
    header["extra"] = c.extra;
    std::string payload;
    auto table = nlohmann::json::array();
    for (const auto& t : c.tensors) {
        table.push_back({{"name", t.name}, {"shape", {t.value.rows(), t.value.cols()}}, {"offset", payload.size() / 4}});
        detail::append_floats(payload, t.value);
    }
    header["tensors"] = table;
    auto moments = nlohmann::json::array();
    for (std::size_t i = 0; i < c.adam.m.size(); ++i) {
        moments.push_back({{"m", payload.size() / 4}});
        detail::append_floats(payload, c.adam.m[i]);
        moments.back()["v"] = payload.size() / 4;
        detail::append_floats(payload, c.adam.v[i]);
    }
    header["optimizer"] = {{"step", c.adam.step}, {"moments", moments}};
    const std::string text = header.dump();

    std::string out(kCheckpointMagic, 8);
    auto put = [&](std::uint64_t v, int bytes) {
        for (int b = 0; b < bytes; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
    };
    put(kCheckpointVersion, 4);
    put(text.size(), 8);
    out += text;
    out += payload;
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) fail(ErrorCode::IoError, "cannot write " + tmp);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) fail(ErrorCode::IoError, "short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::IoError, "cannot open checkpoint " + path.string());
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (data.size() < 20 || data.compare(0, 8, std::string(kCheckpointMagic, 8)) != 0)
        fail(ErrorCode::UnsupportedFormat, path.string() + " is not a checkpoint");
    auto get = [&](std::size_t at, int bytes) {
        std::uint64_t v = 0;
        for (int b = 0; b < bytes; ++b)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[at + static_cast<std::size_t>(b)])) << (8 * b);
        return v;
    };
    const auto version = get(8, 4);
    if (version != kCheckpointVersion)
        fail(ErrorCode::UnsupportedFormat, "checkpoint version " + std::to_string(version) + " not supported");
    const auto len = get(12, 8);
    if (20 + len > data.size()) fail(ErrorCode::CorruptData, "checkpoint header truncated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(data.substr(20, len));
    } catch (const std::exception& e) {
        fail(ErrorCode::CorruptData, std::string("checkpoint header: ") + e.what());
    }
    const std::string payload = data.substr(20 + len);

    Checkpoint c;
    try {
        c.config = header.at("model").get<ModelConfig>();
        c.epoch = header.at("epoch").get<int>();
        c.best_val_dsc = header.at("best_val_dsc").get<double>();
        c.extra = header.value("extra", nlohmann::json::object());
        for (const auto& t : header.at("tensors")) {
            const auto shape = t.at("shape");
            c.tensors.push_back({t.at("name").get<std::string>(),
                                 detail::read_floats(payload, t.at("offset").get<std::size_t>(), shape[0].get<Eigen::Index>(),
                                                     shape[1].get<Eigen::Index>())});
        }
        const auto& opt = header.at("optimizer");
        c.adam.step = opt.at("step").get<std::uint64_t>();
        const auto& moments = opt.at("moments");
        if (!moments.empty() && moments.size() != c.tensors.size())
            fail(ErrorCode::CorruptData, "optimizer moments do not match tensors");
        for (std::size_t i = 0; i < moments.size(); ++i) {
            const auto& t = c.tensors[i].value;
            c.adam.m.push_back(detail::read_floats(payload, moments[i].at("m").get<std::size_t>(), t.rows(), t.cols()));
            c.adam.v.push_back(detail::read_floats(payload, moments[i].at("v").get<std::size_t>(), t.rows(), t.cols()));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::CorruptData, std::string("checkpoint header: ") + e.what());
    }
    return c;
}

/// Model with the checkpoint's weights; names and shapes must match the
/// architecture derived from the stored config.
inline Model<float> model_from_checkpoint(const Checkpoint& c) {
    Model<float> m(c.config);
    if (m.params.size() != c.tensors.size())
        fail(ErrorCode::ConfigMismatch, "checkpoint has " + std::to_string(c.tensors.size()) + " tensors, architecture needs " +
                                            std::to_string(m.params.size()));
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        auto& p = m.params[i];
        const auto& t = c.tensors[i];
        if (p.name != t.name || p.value.rows() != t.value.rows() || p.value.cols() != t.value.cols())
            fail(ErrorCode::ConfigMismatch, "checkpoint tensor " + t.name + " does not match parameter " + p.name);
        p.value = t.value;
    }
    return m;
}

} // namespace memseg

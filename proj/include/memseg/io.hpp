#pragma once

// NIfTI-1 (single file, uncompressed, little-endian, 3D) and raw+JSON sidecar
// volume I/O. Axes are taken as stored: NIfTI dim[1] (fastest) maps to x.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "memseg/volume.hpp"

namespace memseg {

static_assert(std::endian::native == std::endian::little, "memseg I/O assumes a little-endian host");

enum class Dtype : std::int16_t { U8 = 2, I16 = 4, F32 = 16 };

inline std::size_t dtype_bytes(Dtype d) {
    switch (d) {
    case Dtype::U8: return 1;
    case Dtype::I16: return 2;
    case Dtype::F32: return 4;
    }
    return 0;
}

inline std::string dtype_name(Dtype d) {
    switch (d) {
    case Dtype::U8: return "u8";
    case Dtype::I16: return "i16";
    case Dtype::F32: return "f32";
    }
    return "?";
}

inline Dtype parse_dtype(const std::string& s) {
    if (s == "u8") return Dtype::U8;
    if (s == "i16") return Dtype::I16;
    if (s == "f32") return Dtype::F32;
    fail(ErrorCode::UnsupportedDatatype, "unknown dtype '" + s + "'");
}

namespace detail {

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

template <typename T>
T load(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

template <typename T>
void store(char* p, T v) {
    std::memcpy(p, &v, sizeof(T));
}

inline std::vector<double> decode(const char* p, std::size_t count, Dtype dtype) {
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        switch (dtype) {
        case Dtype::U8: out[i] = static_cast<unsigned char>(p[i]); break;
        case Dtype::I16: out[i] = load<std::int16_t>(p + 2 * i); break;
        case Dtype::F32: out[i] = load<float>(p + 4 * i); break;
        }
    }
    return out;
}

inline void encode(char* p, const std::vector<double>& values, Dtype dtype) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = values[i];
        switch (dtype) {
        case Dtype::U8:
            if (v < 0 || v > 255 || v != std::round(v)) fail(ErrorCode::UnsupportedDatatype, "value not representable as u8");
            p[i] = static_cast<char>(static_cast<std::uint8_t>(v));
            break;
        case Dtype::I16:
            if (v < -32768 || v > 32767 || v != std::round(v))
                fail(ErrorCode::UnsupportedDatatype, "value not representable as i16");
            store<std::int16_t>(p + 2 * i, static_cast<std::int16_t>(v));
            break;
        case Dtype::F32: store<float>(p + 4 * i, static_cast<float>(v)); break;
        }
    }
}

inline LabelMask labels_from_values(const Geometry& g, const std::vector<double>& values,
                                    std::vector<std::string> class_names) {
    LabelMask m(g, std::move(class_names));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = values[i];
        if (v < 0 || v != std::round(v) || v >= static_cast<double>(m.class_count()))
            fail(ErrorCode::CorruptData, "label value " + std::to_string(v) + " invalid for " +
                                             std::to_string(m.class_count()) + " declared classes");
        m.labels[i] = static_cast<std::uint8_t>(v);
    }
    return m;
}

inline std::vector<double> values_from_labels(const LabelMask& m) {
    return {m.labels.begin(), m.labels.end()};
}

} // namespace detail

// ---------------------------------------------------------------- NIfTI-1

constexpr std::int16_t kNiftiIntentLabel = 1002;
constexpr std::size_t kNiftiHeaderSize = 348;
constexpr std::size_t kNiftiVoxOffset = 352;

struct NiftiImage {
    Volume volume;
    Dtype dtype = Dtype::F32;
    bool label_intent = false;
};

inline NiftiImage read_nifti_image(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    if (bytes.size() < kNiftiHeaderSize) fail(ErrorCode::UnsupportedFormat, path.string() + ": truncated header");
    const char* h = bytes.data();
    if (detail::load<std::int32_t>(h) != 348)
        fail(ErrorCode::UnsupportedFormat, path.string() + ": sizeof_hdr != 348 (not little-endian NIfTI-1)");
    if (std::memcmp(h + 344, "n+1\0", 4) != 0) fail(ErrorCode::UnsupportedFormat, path.string() + ": bad magic");

    std::int16_t dim[8];
    for (int i = 0; i < 8; ++i) dim[i] = detail::load<std::int16_t>(h + 40 + 2 * i);
    if (dim[0] != 3) fail(ErrorCode::DimensionError, "expected 3 dimensions, header says " + std::to_string(dim[0]));
    for (int i = 1; i <= 3; ++i)
        if (dim[i] <= 0) fail(ErrorCode::DimensionError, "non-positive dimension in header");

    const auto datatype = detail::load<std::int16_t>(h + 70);
    if (datatype != 2 && datatype != 4 && datatype != 16)
        fail(ErrorCode::UnsupportedDatatype, "NIfTI datatype " + std::to_string(datatype));
    const auto dtype = static_cast<Dtype>(datatype);

    float pixdim[8];
    for (int i = 0; i < 8; ++i) pixdim[i] = detail::load<float>(h + 76 + 4 * i);
    const float vox_offset = detail::load<float>(h + 108);
    const float slope = detail::load<float>(h + 112);
    const float inter = detail::load<float>(h + 116);

    NiftiImage out;
    out.dtype = dtype;
    out.label_intent = detail::load<std::int16_t>(h + 68) == kNiftiIntentLabel;
    Geometry& g = out.volume.geometry;
    g.dims = {static_cast<std::size_t>(dim[3]), static_cast<std::size_t>(dim[2]), static_cast<std::size_t>(dim[1])};
    g.spacing = {pixdim[3], pixdim[2], pixdim[1]};
    g.origin = {detail::load<float>(h + 276), detail::load<float>(h + 272), detail::load<float>(h + 268)};
    g.validate();

    const auto offset = static_cast<std::size_t>(vox_offset);
    if (offset < kNiftiHeaderSize || !(vox_offset >= 0.0f)) fail(ErrorCode::UnsupportedFormat, "bad vox_offset");
    const std::size_t count = g.voxel_count();
    if (bytes.size() < offset + count * dtype_bytes(dtype))
        fail(ErrorCode::SizeMismatch, path.string() + ": payload shorter than dims imply");

    out.volume.data = detail::decode(h + offset, count, dtype);
    if (slope != 0.0f && std::isfinite(slope)) {
        for (double& v : out.volume.data) v = v * static_cast<double>(slope) + static_cast<double>(inter);
    }
    for (double v : out.volume.data)
        if (!std::isfinite(v)) fail(ErrorCode::CorruptData, path.string() + ": non-finite voxel value");
    return out;
}

inline VolumeBundle read_nifti(const std::filesystem::path& path) {
    auto img = read_nifti_image(path);
    VolumeBundle b;
    b.image = std::move(img.volume);
    b.meta["source"] = path.string();
    b.meta["dtype"] = dtype_name(img.dtype);
    if (img.label_intent) b.meta["intent"] = "label";
    return b;
}

inline LabelMask read_nifti_labels(const std::filesystem::path& path,
                                   std::vector<std::string> class_names = default_class_names()) {
    auto img = read_nifti_image(path);
    return detail::labels_from_values(img.volume.geometry, img.volume.data, std::move(class_names));
}

inline void write_nifti(const Volume& volume, const std::filesystem::path& path, Dtype dtype = Dtype::F32,
                        bool label_intent = false) {
    volume.validate();
    const Geometry& g = volume.geometry;
    for (auto d : g.dims)
        if (d > 32767) fail(ErrorCode::DimensionError, "dimension exceeds NIfTI-1 limit");

    std::vector<char> bytes(kNiftiVoxOffset + g.voxel_count() * dtype_bytes(dtype), 0);
    char* h = bytes.data();
    detail::store<std::int32_t>(h, 348);
    h[38] = 'r';
    const std::int16_t dim[8] = {3, static_cast<std::int16_t>(g.dims[2]), static_cast<std::int16_t>(g.dims[1]),
                                 static_cast<std::int16_t>(g.dims[0]), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) detail::store<std::int16_t>(h + 40 + 2 * i, dim[i]);
    detail::store<std::int16_t>(h + 68, label_intent ? kNiftiIntentLabel : std::int16_t{0});
    detail::store<std::int16_t>(h + 70, static_cast<std::int16_t>(dtype));
    detail::store<std::int16_t>(h + 72, static_cast<std::int16_t>(8 * dtype_bytes(dtype)));
    const float pixdim[8] = {1.0f, static_cast<float>(g.spacing[2]), static_cast<float>(g.spacing[1]),
                             static_cast<float>(g.spacing[0]), 1.0f, 1.0f, 1.0f, 1.0f};
    for (int i = 0; i < 8; ++i) detail::store<float>(h + 76 + 4 * i, pixdim[i]);
    detail::store<float>(h + 108, static_cast<float>(kNiftiVoxOffset));
    detail::store<float>(h + 112, 0.0f);
    detail::store<float>(h + 116, 0.0f);
    h[123] = 2; // xyzt_units: mm
    detail::store<float>(h + 268, static_cast<float>(g.origin[2]));
    detail::store<float>(h + 272, static_cast<float>(g.origin[1]));
    detail::store<float>(h + 276, static_cast<float>(g.origin[0]));
    std::memcpy(h + 344, "n+1\0", 4);
    detail::encode(h + kNiftiVoxOffset, volume.data, dtype);
    detail::write_file(path, bytes);
}

inline void write_nifti(const LabelMask& mask, const std::filesystem::path& path) {
    mask.validate();
    Volume v(mask.geometry);
    v.data = detail::values_from_labels(mask);
    write_nifti(v, path, Dtype::U8, true);
}

/// Companion paths for the masks of a bundle written next to its image.
inline std::filesystem::path companion_path(const std::filesystem::path& image_path, const std::string& suffix) {
    auto stem = image_path.filename().string();
    std::string ext;
    for (const char* e : {".nii", ".raw", ".json"}) {
        const std::string s(e);
        if (stem.size() > s.size() && stem.compare(stem.size() - s.size(), s.size(), s) == 0) {
            ext = s;
            stem.resize(stem.size() - s.size());
            break;
        }
    }
    return image_path.parent_path() / (stem + "_" + suffix + ext);
}

inline void write_nifti(const VolumeBundle& bundle, const std::filesystem::path& path, Dtype dtype = Dtype::F32) {
    bundle.validate();
    write_nifti(bundle.image, path, dtype);
    if (bundle.mask) write_nifti(*bundle.mask, companion_path(path, "mask"));
    if (bundle.bone) write_nifti(*bundle.bone, companion_path(path, "bone"));
}

// ---------------------------------------------------------------- raw + sidecar

struct RawSidecar {
    Geometry geometry;
    Dtype dtype = Dtype::F32;
    bool label = false;
    std::vector<std::string> class_names;
};

inline nlohmann::json to_json(const RawSidecar& s) {
    const auto& g = s.geometry;
    nlohmann::json j;
    j["dims"] = {g.dims[0], g.dims[1], g.dims[2]};
    j["spacing"] = {g.spacing[0], g.spacing[1], g.spacing[2]};
    j["origin"] = {g.origin[0], g.origin[1], g.origin[2]};
    j["dtype"] = dtype_name(s.dtype);
    j["byte_order"] = "le";
    j["label"] = s.label;
    if (s.label) j["class_names"] = s.class_names;
    return j;
}

inline RawSidecar parse_sidecar(const nlohmann::json& j) {
    RawSidecar s;
    try {
        const auto dims = j.at("dims").get<std::vector<long long>>();
        const auto spacing = j.at("spacing").get<std::vector<double>>();
        if (dims.size() != 3 || spacing.size() != 3) fail(ErrorCode::DimensionError, "sidecar dims/spacing need 3 entries");
        for (int a = 0; a < 3; ++a) {
            if (dims[a] <= 0) fail(ErrorCode::DimensionError, "sidecar dims must be positive");
            s.geometry.dims[a] = static_cast<std::size_t>(dims[a]);
            s.geometry.spacing[a] = spacing[a];
        }
        if (j.contains("origin")) {
            const auto origin = j.at("origin").get<std::vector<double>>();
            if (origin.size() != 3) fail(ErrorCode::DimensionError, "sidecar origin needs 3 entries");
            for (int a = 0; a < 3; ++a) s.geometry.origin[a] = origin[a];
        }
        s.dtype = parse_dtype(j.at("dtype").get<std::string>());
        const auto order = j.value("byte_order", std::string("le"));
        if (order != "le") fail(ErrorCode::UnsupportedFormat, "byte_order '" + order + "' unsupported");
        s.label = j.value("label", false);
        if (j.contains("class_names")) s.class_names = j.at("class_names").get<std::vector<std::string>>();
        if (s.label && s.class_names.empty()) s.class_names = default_class_names();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::UnsupportedFormat, std::string("malformed sidecar: ") + e.what());
    }
    s.geometry.validate();
    return s;
}

inline VolumeBundle read_raw(const std::filesystem::path& data_path, const std::filesystem::path& sidecar_path) {
    const auto side_bytes = detail::read_file(sidecar_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(side_bytes.begin(), side_bytes.end());
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::UnsupportedFormat, sidecar_path.string() + ": " + e.what());
    }
    const RawSidecar side = parse_sidecar(j);
    const auto bytes = detail::read_file(data_path);
    const std::size_t count = side.geometry.voxel_count();
    if (bytes.size() != count * dtype_bytes(side.dtype))
        fail(ErrorCode::SizeMismatch, data_path.string() + ": " + std::to_string(bytes.size()) + " bytes, sidecar implies " +
                                          std::to_string(count * dtype_bytes(side.dtype)));

    VolumeBundle b;
    b.image.geometry = side.geometry;
    b.image.data = detail::decode(bytes.data(), count, side.dtype);
    b.image.validate();
    b.meta["source"] = data_path.string();
    b.meta["dtype"] = dtype_name(side.dtype);
    if (side.label) {
        b.mask = detail::labels_from_values(side.geometry, b.image.data, side.class_names);
        b.meta["intent"] = "label";
    }
    return b;
}

inline void write_raw(const Volume& volume, const std::filesystem::path& data_path,
                      const std::filesystem::path& sidecar_path, Dtype dtype = Dtype::F32) {
    volume.validate();
    std::vector<char> bytes(volume.data.size() * dtype_bytes(dtype));
    detail::encode(bytes.data(), volume.data, dtype);
    detail::write_file(data_path, bytes);
    RawSidecar side{volume.geometry, dtype, false, {}};
    const auto text = to_json(side).dump(2);
    detail::write_file(sidecar_path, std::vector<char>(text.begin(), text.end()));
}

inline void write_raw(const LabelMask& mask, const std::filesystem::path& data_path,
                      const std::filesystem::path& sidecar_path) {
    mask.validate();
    std::vector<char> bytes(mask.labels.begin(), mask.labels.end());
    detail::write_file(data_path, bytes);
    RawSidecar side{mask.geometry, Dtype::U8, true, mask.class_names};
    const auto text = to_json(side).dump(2);
    detail::write_file(sidecar_path, std::vector<char>(text.begin(), text.end()));
}

inline void write_raw(const VolumeBundle& bundle, const std::filesystem::path& data_path,
                      const std::filesystem::path& sidecar_path, Dtype dtype = Dtype::F32) {
    bundle.validate();
    write_raw(bundle.image, data_path, sidecar_path, dtype);
    if (bundle.mask)
        write_raw(*bundle.mask, companion_path(data_path, "mask"), companion_path(sidecar_path, "mask"));
    if (bundle.bone)
        write_raw(*bundle.bone, companion_path(data_path, "bone"), companion_path(sidecar_path, "bone"));
}

/// Reads by extension: ".raw" pairs with a same-stem ".json" sidecar,
/// anything else is read as NIfTI.
inline VolumeBundle read_volume_file(const std::filesystem::path& path) {
    if (path.extension() == ".raw") {
        auto side = path;
        side.replace_extension(".json");
        return read_raw(path, side);
    }
    return read_nifti(path);
}

inline LabelMask read_label_file(const std::filesystem::path& path,
                                 std::vector<std::string> class_names = default_class_names()) {
    if (path.extension() == ".raw") {
        auto side = path;
        side.replace_extension(".json");
        VolumeBundle b = read_raw(path, side);
        if (b.mask) return *b.mask;
        return detail::labels_from_values(b.image.geometry, b.image.data, std::move(class_names));
    }
    return read_nifti_labels(path, std::move(class_names));
}

/// Writes by extension, mirroring read_volume_file.
inline void write_volume_file(const VolumeBundle& bundle, const std::filesystem::path& path, Dtype dtype = Dtype::F32) {
    if (path.extension() == ".raw") {
        auto side = path;
        side.replace_extension(".json");
        write_raw(bundle, path, side, dtype);
    } else {
        write_nifti(bundle, path, dtype);
    }
}

inline void write_label_file(const LabelMask& mask, const std::filesystem::path& path) {
    if (path.extension() == ".raw") {
        auto side = path;
        side.replace_extension(".json");
        write_raw(mask, path, side);
    } else {
        write_nifti(mask, path);
    }
}

} // namespace memseg

#pragma once

// Synthetic knee-like phantoms with analytic ground truth: bone primitives,
// cartilage shell caps and slabs of declared thickness, and a meniscus wedge.
// Thickness follows the voxel-center convention: a slab of thickness t at
// spacing h has t/h + 1 voxel layers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "memseg/error.hpp"
#include "memseg/io.hpp"
#include "memseg/rng.hpp"
#include "memseg/volume.hpp"

namespace memseg {

enum class BoneKind { Ball, HalfSpace, Box };

struct BoneShape {
    BoneKind kind = BoneKind::Ball;
    Vec3 center{0, 0, 0}; // Ball
    double radius = 0.0;  // Ball
    int axis = 1;         // HalfSpace: bone where coord[axis] * sign >= offset * sign
    double sign = 1.0;
    double offset = 0.0;
    Vec3 lo{0, 0, 0}; // Box, inclusive
    Vec3 hi{0, 0, 0};

    bool contains(const Vec3& p) const {
        constexpr double eps = 1e-9;
        switch (kind) {
        case BoneKind::Ball: {
            const double dz = p[0] - center[0], dy = p[1] - center[1], dx = p[2] - center[2];
            return dz * dz + dy * dy + dx * dx <= radius * radius + eps;
        }
        case BoneKind::HalfSpace: return (p[axis] - offset) * sign >= -eps;
        case BoneKind::Box:
            for (int a = 0; a < 3; ++a)
                if (p[a] < lo[a] - eps || p[a] > hi[a] + eps) return false;
            return true;
        }
        return false;
    }
};

enum class StructureKind { ShellCap, Slab, Wedge };

struct StructureSpec {
    StructureKind kind = StructureKind::ShellCap;
    int class_id = 1;
    double thickness = 2.0; // mm (ShellCap, Slab)

    // ShellCap: shell outside ball bone `bone`, restricted to directions within
    // half_angle_deg of `direction`.
    std::size_t bone = 0;
    Vec3 direction{0, 1, 0};
    double half_angle_deg = 180.0;

    // Slab: cartilage where coord[axis] in [start, start + thickness] (start is
    // the layer touching bone when sign < 0, i.e. bone lies below start) and the
    // other two coordinates within [lo, hi].
    int axis = 1;
    double start = 0.0;
    Vec3 lo{-1e9, -1e9, -1e9};
    Vec3 hi{1e9, 1e9, 1e9};

    // Wedge: ring sector around the y axis through (center[0], center[2]),
    // sitting `gap` mm above the sphere (center, base_radius); height grows
    // linearly from 0 at inner_radius to `height` at outer_radius.
    Vec3 center{0, 0, 0};
    double base_radius = 0.0;
    double gap = 0.5;
    double inner_radius = 0.0;
    double outer_radius = 0.0;
    double height = 0.0;
    double sector_half_angle_deg = 60.0;

    bool contains(const Vec3& p, const std::vector<BoneShape>& bones) const {
        constexpr double eps = 1e-9;
        switch (kind) {
        case StructureKind::ShellCap: {
            const BoneShape& b = bones.at(bone);
            const double dz = p[0] - b.center[0], dy = p[1] - b.center[1], dx = p[2] - b.center[2];
            const double r = std::sqrt(dz * dz + dy * dy + dx * dx);
            if (r <= b.radius + eps || r > b.radius + thickness + eps) return false;
            const double dn = std::sqrt(direction[0] * direction[0] + direction[1] * direction[1] +
                                        direction[2] * direction[2]);
            const double cosang = (dz * direction[0] + dy * direction[1] + dx * direction[2]) / (r * dn);
            return cosang >= std::cos(half_angle_deg * std::numbers::pi / 180.0) - eps;
        }
        case StructureKind::Slab: {
            if (p[axis] < start - eps || p[axis] > start + thickness + eps) return false;
            for (int a = 0; a < 3; ++a) {
                if (a == axis) continue;
                if (p[a] < lo[a] - eps || p[a] > hi[a] + eps) return false;
            }
            return true;
        }
        case StructureKind::Wedge: {
            const double dz = p[0] - center[0], dx = p[2] - center[2];
            const double rho = std::sqrt(dz * dz + dx * dx);
            if (rho < inner_radius || rho > outer_radius || rho >= base_radius) return false;
            const double phi = std::atan2(dz, dx);
            if (std::abs(phi) > sector_half_angle_deg * std::numbers::pi / 180.0) return false;
            const double surface = center[1] - std::sqrt(base_radius * base_radius - rho * rho);
            const double bottom = surface - gap;
            const double h = height * (rho - inner_radius) / (outer_radius - inner_radius);
            return p[1] <= bottom && p[1] >= bottom - h;
        }
        }
        return false;
    }
};

struct TissueIntensity {
    double mean = 0.0;
    double std = 0.0;
};

struct PhantomSpec {
    Index3 dims{64, 64, 64};
    Vec3 spacing{0.5, 0.5, 0.5};
    std::vector<BoneShape> bones;
    std::vector<StructureSpec> structures;
    std::vector<std::string> class_names = default_class_names();
    TissueIntensity background{0.30, 0.0};
    TissueIntensity bone_tissue{0.55, 0.0};
    TissueIntensity cartilage{0.90, 0.0};
    TissueIntensity meniscus{0.05, 0.0};
    double noise_sigma = 0.03;
    std::uint64_t seed = 0;

    Geometry geometry() const { return {dims, spacing, {0.0, 0.0, 0.0}}; }

    void validate() const {
        geometry().validate();
        const double h = std::min({spacing[0], spacing[1], spacing[2]});
        for (std::size_t i = 0; i < structures.size(); ++i) {
            const auto& s = structures[i];
            const std::string where = "structures[" + std::to_string(i) + "]";
            if (s.class_id <= 0 || static_cast<std::size_t>(s.class_id) >= class_names.size())
                fail(ErrorCode::SpecError, where + ".class_id out of range");
            if (s.kind != StructureKind::Wedge && s.thickness + 1e-9 < h)
                fail(ErrorCode::SpecError, where + ".thickness below one voxel spacing");
            if (s.kind == StructureKind::ShellCap &&
                (s.bone >= bones.size() || bones[s.bone].kind != BoneKind::Ball))
                fail(ErrorCode::SpecError, where + ".bone must reference a ball");
            if (s.kind == StructureKind::Wedge && !(s.outer_radius > s.inner_radius && s.height > 0.0))
                fail(ErrorCode::SpecError, where + ".wedge radii/height invalid");
        }
        for (double v : {noise_sigma, background.std, bone_tissue.std, cartilage.std, meniscus.std})
            if (!(v >= 0.0)) fail(ErrorCode::SpecError, "intensity std/noise must be non-negative");
    }
};

/// The default knee-like layout in a 32 mm cube: femoral and tibial shell caps
/// on two balls, a patellar slab on a box, a lateral meniscus wedge.
inline PhantomSpec default_phantom_spec(double t_fem = 2.0, double t_tib = 2.0, double t_pat = 2.0) {
    PhantomSpec spec;
    BoneShape femur{BoneKind::Ball, {16.0, 7.0, 15.0}, 9.0};
    BoneShape tibia{BoneKind::Ball, {16.0, 47.0, 15.0}, 20.0};
    BoneShape patella;
    patella.kind = BoneKind::Box;
    patella.lo = {10.0, 2.0, 28.5};
    patella.hi = {22.0, 11.0, 31.5};
    spec.bones = {femur, tibia, patella};

    StructureSpec fem;
    fem.kind = StructureKind::ShellCap;
    fem.class_id = 1;
    fem.thickness = t_fem;
    fem.bone = 0;
    fem.direction = {0.0, 1.0, 0.0};
    fem.half_angle_deg = 65.0;

    StructureSpec tib;
    tib.kind = StructureKind::ShellCap;
    tib.class_id = 2;
    tib.thickness = t_tib;
    tib.bone = 1;
    tib.direction = {0.0, -1.0, 0.0};
    tib.half_angle_deg = 28.0;

    StructureSpec pat;
    pat.kind = StructureKind::Slab;
    pat.class_id = 3;
    pat.thickness = t_pat;
    pat.axis = 2;
    pat.start = patella.lo[2] - 0.5 - t_pat; // bone starts one voxel above the last layer
    pat.lo = {patella.lo[0], patella.lo[1], 0.0};
    pat.hi = {patella.hi[0], patella.hi[1], 0.0};

    StructureSpec men;
    men.kind = StructureKind::Wedge;
    men.class_id = 4;
    men.center = tibia.center;
    men.base_radius = tibia.radius + t_tib;
    men.gap = 0.5;
    men.inner_radius = 7.0;
    men.outer_radius = 12.5;
    men.height = 3.0;
    men.sector_half_angle_deg = 60.0;

    spec.structures = {fem, tib, pat, men};
    return spec;
}

/// Noiseless flat layer: bone fills y < start, cartilage y in [start, start + t],
/// spanning the full z/x extent of an n^3 grid.
inline PhantomSpec slab_phantom_spec(double t, double spacing, std::size_t n = 24) {
    PhantomSpec spec;
    spec.dims = {n, n, n};
    spec.spacing = {spacing, spacing, spacing};
    spec.noise_sigma = 0.0;
    const double start = 4.0 * spacing;
    BoneShape bone;
    bone.kind = BoneKind::HalfSpace;
    bone.axis = 1;
    bone.sign = -1.0;
    bone.offset = start - 0.5 * spacing;
    spec.bones = {bone};
    StructureSpec slab;
    slab.kind = StructureKind::Slab;
    slab.class_id = 1;
    slab.thickness = t;
    slab.axis = 1;
    slab.start = start;
    spec.structures = {slab};
    return spec;
}

/// Noiseless full spherical shell of thickness t around a centered ball.
inline PhantomSpec shell_phantom_spec(double radius, double t, double spacing) {
    PhantomSpec spec;
    const auto n = static_cast<std::size_t>(std::ceil(2.0 * (radius + t + 2.0) / spacing)) + 1;
    spec.dims = {n, n, n};
    spec.spacing = {spacing, spacing, spacing};
    spec.noise_sigma = 0.0;
    const double c = 0.5 * static_cast<double>(n - 1) * spacing;
    spec.bones = {BoneShape{BoneKind::Ball, {c, c, c}, radius}};
    StructureSpec shell;
    shell.kind = StructureKind::ShellCap;
    shell.class_id = 1;
    shell.thickness = t;
    shell.bone = 0;
    shell.half_angle_deg = 180.0;
    spec.structures = {shell};
    return spec;
}

namespace detail {

inline bool structure_touches_bone_design(const StructureSpec& s) { return s.kind != StructureKind::Wedge; }

} // namespace detail

inline VolumeBundle generate(const PhantomSpec& spec) {
    spec.validate();
    const Geometry g = spec.geometry();
    VolumeBundle bundle;
    bundle.image = Volume(g);
    bundle.mask = LabelMask(g, spec.class_names);
    bundle.bone = LabelMask(g, {"background", "bone"});

    for (std::size_t z = 0; z < g.dims[0]; ++z)
        for (std::size_t y = 0; y < g.dims[1]; ++y)
            for (std::size_t x = 0; x < g.dims[2]; ++x) {
                const Vec3 p = g.to_mm(z, y, x);
                int label = 0;
                for (std::size_t i = 0; i < spec.structures.size(); ++i) {
                    const auto& s = spec.structures[i];
                    if (!s.contains(p, spec.bones)) continue;
                    if (label != 0)
                        fail(ErrorCode::SpecError, "structures overlap at voxel (" + std::to_string(z) + "," +
                                                       std::to_string(y) + "," + std::to_string(x) + ")");
                    label = s.class_id;
                }
                bool in_bone = false;
                for (const auto& b : spec.bones) in_bone |= b.contains(p);
                if (in_bone && label != 0) {
                    // shell and slab definitions exclude their own bone; another bone
                    // reaching into a structure is a layout error
                    fail(ErrorCode::SpecError, "structure overlaps bone at voxel (" + std::to_string(z) + "," +
                                                   std::to_string(y) + "," + std::to_string(x) + ")");
                }
                bundle.mask->at(z, y, x) = static_cast<std::uint8_t>(label);
                bundle.bone->at(z, y, x) = in_bone ? 1 : 0;
            }

    Rng rng(Rng::derive(spec.seed, 0x9A7));
    for (std::size_t i = 0; i < g.voxel_count(); ++i) {
        const int label = bundle.mask->labels[i];
        const TissueIntensity& t = label == 4                  ? spec.meniscus
                                   : label != 0                ? spec.cartilage
                                   : bundle.bone->labels[i]    ? spec.bone_tissue
                                                               : spec.background;
        double v = t.mean;
        if (t.std > 0.0) v += t.std * rng.normal();
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
        bundle.image.data[i] = v;
    }

    nlohmann::json thickness = nlohmann::json::object();
    for (const auto& s : spec.structures)
        if (detail::structure_touches_bone_design(s))
            thickness[std::to_string(s.class_id)] = s.thickness;
    bundle.meta["expected_thickness"] = thickness.dump();
    bundle.meta["seed"] = std::to_string(spec.seed);
    return bundle;
}

// ---------------------------------------------------------------- corpus

struct CorpusRanges {
    double thickness_min = 1.5;
    double thickness_max = 2.5;
    double radius_scale_min = 0.9;
    double radius_scale_max = 1.1;
    double shift_mm = 1.5;
    double noise_sigma = 0.03;
    Index3 dims{64, 64, 64};
    Vec3 spacing{0.5, 0.5, 0.5};

    void validate() const {
        auto bad = [](const std::string& field, const std::string& why) { fail(ErrorCode::SpecError, field + " " + why); };
        if (!(thickness_min > 0.0)) bad("thickness_min", "must be positive");
        if (!(thickness_max >= thickness_min)) bad("thickness_max", "must be >= thickness_min");
        if (!(radius_scale_min > 0.0)) bad("radius_scale_min", "must be positive");
        if (!(radius_scale_max >= radius_scale_min)) bad("radius_scale_max", "must be >= radius_scale_min");
        if (!(shift_mm >= 0.0)) bad("shift_mm", "must be non-negative");
        if (!(noise_sigma >= 0.0)) bad("noise_sigma", "must be non-negative");
        for (int a = 0; a < 3; ++a) {
            if (dims[a] == 0) bad("dims", "must be positive");
            if (!(spacing[a] > 0.0)) bad("spacing", "must be positive");
        }
        if (thickness_min < *std::min_element(spacing.begin(), spacing.end()))
            bad("thickness_min", "is below one voxel spacing");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CorpusRanges, thickness_min, thickness_max, radius_scale_min,
                                                radius_scale_max, shift_mm, noise_sigma, dims, spacing)

/// Randomized default layout for corpus volume `index`: thicknesses, femoral
/// radius and whole-joint pose are drawn from `ranges`.
inline PhantomSpec randomized_spec(const CorpusRanges& ranges, std::uint64_t seed, std::uint64_t index) {
    Rng rng(Rng::derive(seed, index, 0xC0));
    const double t_fem = rng.uniform(ranges.thickness_min, ranges.thickness_max);
    const double t_tib = rng.uniform(ranges.thickness_min, ranges.thickness_max);
    const double t_pat = rng.uniform(ranges.thickness_min, ranges.thickness_max);
    const double scale = rng.uniform(ranges.radius_scale_min, ranges.radius_scale_max);
    const Vec3 shift{rng.uniform(-ranges.shift_mm, ranges.shift_mm), rng.uniform(-ranges.shift_mm, ranges.shift_mm),
                     rng.uniform(-ranges.shift_mm, ranges.shift_mm)};

    PhantomSpec spec = default_phantom_spec(t_fem, t_tib, t_pat);
    spec.dims = ranges.dims;
    spec.spacing = ranges.spacing;
    spec.noise_sigma = ranges.noise_sigma;
    spec.seed = Rng::derive(seed, index, 0x5EED);
    // femur grows or shrinks about its lowest point so the joint gap is kept
    auto& femur = spec.bones[0];
    const double bottom = femur.center[1] + femur.radius;
    femur.radius *= scale;
    femur.center[1] = bottom - femur.radius;
    for (auto& b : spec.bones) {
        for (int a = 0; a < 3; ++a) {
            b.center[a] += shift[a];
            b.lo[a] += shift[a];
            b.hi[a] += shift[a];
        }
    }
    auto& pat = spec.structures[2];
    pat.start += shift[2];
    for (int a = 0; a < 3; ++a) {
        pat.lo[a] += shift[a];
        pat.hi[a] += shift[a];
    }
    auto& men = spec.structures[3];
    men.center = spec.bones[1].center;
    return spec;
}

struct ManifestEntry {
    std::string id;
    std::string image;
    std::string mask;
    std::string bone;
    std::string split; // "train" | "val"
    std::map<std::string, double> expected_thickness;
};

struct Manifest {
    std::vector<ManifestEntry> volumes;
    std::uint64_t seed = 0;
    std::filesystem::path root; // directory the relative paths resolve against

    std::vector<const ManifestEntry*> split(const std::string& name) const {
        std::vector<const ManifestEntry*> out;
        for (const auto& v : volumes)
            if (v.split == name) out.push_back(&v);
        return out;
    }
};

inline nlohmann::json to_json(const Manifest& m) {
    nlohmann::json vols = nlohmann::json::array();
    for (const auto& v : m.volumes)
        vols.push_back({{"id", v.id},
                        {"paths", {{"image", v.image}, {"mask", v.mask}, {"bone", v.bone}}},
                        {"split", v.split},
                        {"expected_thickness", v.expected_thickness}});
    return {{"volumes", vols}, {"seed", m.seed}};
}

inline Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IoError, "cannot open manifest " + path.string());
    Manifest m;
    m.root = path.parent_path();
    try {
        const auto j = nlohmann::json::parse(in);
        m.seed = j.value("seed", std::uint64_t{0});
        for (const auto& v : j.at("volumes")) {
            ManifestEntry e;
            e.id = v.at("id").get<std::string>();
            const auto& p = v.at("paths");
            e.image = p.at("image").get<std::string>();
            e.mask = p.value("mask", std::string());
            e.bone = p.value("bone", std::string());
            e.split = v.value("split", std::string("train"));
            if (v.contains("expected_thickness"))
                e.expected_thickness = v.at("expected_thickness").get<std::map<std::string, double>>();
            m.volumes.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::DatasetError, "malformed manifest " + path.string() + ": " + e.what());
    }
    return m;
}

inline VolumeBundle load_manifest_volume(const Manifest& m, const ManifestEntry& e) {
    VolumeBundle b = read_volume_file(m.root / e.image);
    if (!e.mask.empty()) b.mask = read_label_file(m.root / e.mask);
    if (!e.bone.empty()) b.bone = read_label_file(m.root / e.bone, {"background", "bone"});
    b.meta["id"] = e.id;
    b.validate();
    return b;
}

/// Patient-level split: round(0.8 n) train ids (at least one val id when n >= 2),
/// chosen by a seeded permutation.
inline std::vector<std::string> assign_splits(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(Rng::derive(seed, 0x5B1));
    rng.shuffle(std::span<std::size_t>(order));
    std::size_t n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
    if (n >= 2) n_train = std::min(n_train, n - 1);
    n_train = std::max<std::size_t>(n_train, 1);
    std::vector<std::string> split(n, "val");
    for (std::size_t i = 0; i < n_train; ++i) split[order[i]] = "train";
    return split;
}

inline Manifest generate_corpus(std::size_t n, const CorpusRanges& ranges, std::uint64_t seed,
                                const std::filesystem::path& out_dir) {
    if (n == 0) fail(ErrorCode::InvalidArgument, "corpus needs at least one volume");
    ranges.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) fail(ErrorCode::IoError, "cannot create " + out_dir.string() + ": " + ec.message());

    Manifest manifest;
    manifest.seed = seed;
    manifest.root = out_dir;
    const auto splits = assign_splits(n, seed);
    for (std::size_t i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof(id), "phantom_%03zu", i);
        const PhantomSpec spec = randomized_spec(ranges, seed, i);
        const VolumeBundle bundle = generate(spec);
        ManifestEntry e;
        e.id = id;
        e.image = std::string(id) + ".nii";
        e.mask = std::string(id) + "_mask.nii";
        e.bone = std::string(id) + "_bone.nii";
        e.split = splits[i];
        for (const auto& s : spec.structures)
            if (detail::structure_touches_bone_design(s)) e.expected_thickness[std::to_string(s.class_id)] = s.thickness;
        write_nifti(bundle, out_dir / e.image);
        manifest.volumes.push_back(std::move(e));
    }
    std::ofstream out(out_dir / "manifest.json", std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write manifest in " + out_dir.string());
    out << to_json(manifest).dump(2) << '\n';
    return manifest;
}

} // namespace memseg

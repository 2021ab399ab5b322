// memseg: phantom generation, training, propagation and evaluation from the shell.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "memseg/checkpoint.hpp"
#include "memseg/error.hpp"
#include "memseg/io.hpp"
#include "memseg/metrics.hpp"
#include "memseg/morphometry.hpp"
#include "memseg/phantom.hpp"
#include "memseg/propagation.hpp"
#include "memseg/report.hpp"
#include "memseg/resample.hpp"
#include "memseg/stats.hpp"
#include "memseg/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace memseg;

namespace {

int exit_code(ErrorCode c) {
    switch (c) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::InvalidChunkSize:
    case ErrorCode::SpecError:
    case ErrorCode::ConfigMismatch: return 2;
    case ErrorCode::DivergenceError:
    case ErrorCode::GradCheckFailure:
    case ErrorCode::Converged: return 4;
    default: return 3;
    }
}

// ---------------------------------------------------------------- config

/// Flat dotted-key configuration: defaults, then the config file, then flags.
class RunConfig {
public:
    RunConfig() { flatten(defaults(), "", flat_); }

    static json defaults() {
        json d;
        d["command"] = "";
        d["seed"] = 0;
        d["deterministic"] = false;
        d["threads"] = 1;
        d["model"] = ModelConfig{};
        d["train"] = TrainConfig{};
        json phantom = CorpusRanges{};
        phantom["n"] = 20;
        d["phantom"] = phantom;
        d["convert"] = {{"fov", json::array()}, {"dims", json::array()}, {"dtype", "f32"}};
        d["infer"] = {{"strategy", "all"}, {"clicks", 1}, {"split", "val"}, {"format", "nii"}};
        d["sweep"] = {{"strategies", "all,every:10,every:20,every:50"}, {"clicks", "1"}, {"split", "val"}};
        d["eval"] = {{"dataset", "phantom"}, {"reference", ""}};
        d["bench"] = {{"repetitions", 3}, {"strategy", "all"}, {"clicks", 1}, {"split", "val"}};
        d["report"] = {{"title", "Segmentation report"}, {"reference", ""}};
        return d;
    }

    void load_file(const fs::path& path) {
        std::ifstream in(path);
        if (!in) fail(ErrorCode::InvalidArgument, "cannot open config " + path.string());
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            fail(ErrorCode::InvalidArgument, "config " + path.string() + " is not valid JSON: " + e.what());
        }
        if (!j.is_object()) fail(ErrorCode::InvalidArgument, "config " + path.string() + " must be a JSON object");
        json flat = json::object();
        flatten(j, "", flat);
        for (const auto& [k, v] : flat.items()) {
            set(k, v);
            from_file_.push_back(k);
        }
    }

    void set(const std::string& key, const json& value) {
        if (!flat_.contains(key)) fail(ErrorCode::InvalidArgument, "unknown config key '" + key + "'");
        const json& def = flat_[key];
        bool ok = true;
        if (def.is_boolean()) ok = value.is_boolean();
        else if (def.is_number_integer()) ok = value.is_number_integer() && (!def.is_number_unsigned() || value.get<long long>() >= 0);
        else if (def.is_number()) ok = value.is_number();
        else if (def.is_string()) ok = value.is_string();
        else if (def.is_array()) ok = value.is_array();
        if (!ok) fail(ErrorCode::InvalidArgument, "config key '" + key + "' expects " + std::string(def.type_name()) +
                                                      ", got " + value.dump());
        flat_[key] = value;
    }

    /// key=value; the value is read as JSON when it parses, else as a string.
    void set_assignment(const std::string& kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) fail(ErrorCode::InvalidArgument, "--set expects key=value, got '" + kv + "'");
        const std::string v = kv.substr(eq + 1);
        json value = json::parse(v, nullptr, false);
        if (value.is_discarded()) value = v;
        set(kv.substr(0, eq), value);
    }

    bool from_file(const std::string& key) const {
        return std::find(from_file_.begin(), from_file_.end(), key) != from_file_.end();
    }

    const json& operator[](const std::string& key) const { return flat_.at(key); }

    template <typename T>
    T section(const std::string& name) const {
        try {
            return nested().at(name).get<T>();
        } catch (const json::exception& e) {
            fail(ErrorCode::InvalidArgument, "config section '" + name + "': " + e.what());
        }
    }

    json nested() const {
        json out = json::object();
        for (const auto& [k, v] : flat_.items()) {
            json* node = &out;
            std::size_t start = 0, dot;
            while ((dot = k.find('.', start)) != std::string::npos) {
                node = &(*node)[k.substr(start, dot - start)];
                start = dot + 1;
            }
            (*node)[k.substr(start)] = v;
        }
        return out;
    }

    void echo(const fs::path& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
        out << flat_.dump(2) << '\n';
    }

private:
    static void flatten(const json& j, const std::string& prefix, json& out) {
        if (j.is_object() && !j.empty()) {
            for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
        } else {
            out[prefix] = j;
        }
    }

    json flat_ = json::object();
    std::vector<std::string> from_file_;
};

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool deterministic = false;
    int threads = 1;
    std::vector<std::string> sets;
};

RunConfig make_config(const Globals& g, const std::string& command) {
    RunConfig c;
    if (!g.config_path.empty()) c.load_file(g.config_path);
    for (const auto& s : g.sets) c.set_assignment(s);
    c.set("command", command);
    if (g.deterministic) c.set("deterministic", true);
    if (g.threads < 1) fail(ErrorCode::InvalidArgument, "--threads must be >= 1");
    if (g.threads != 1 || !c.from_file("threads")) c.set("threads", g.threads);
    if (g.seed) {
        c.set("seed", *g.seed);
    } else if (!c.from_file("seed") && !c["deterministic"].get<bool>()) {
        // fresh seed, recorded in the echoed config so the run can be replayed
        c.set("seed", static_cast<std::uint64_t>(std::random_device{}()));
    }
    return c;
}

std::uint64_t seed_of(const RunConfig& c) { return c["seed"].get<std::uint64_t>(); }
bool deterministic(const RunConfig& c) { return c["deterministic"].get<bool>(); }

// ---------------------------------------------------------------- helpers

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    out << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<double> parse_numbers(const std::string& text) {
    std::vector<double> out;
    std::string cleaned = text;
    std::replace_if(cleaned.begin(), cleaned.end(), [](char c) { return c == ',' || c == '\n' || c == '\r' || c == '\t'; }, ' ');
    std::istringstream in(cleaned);
    std::string tok;
    while (in >> tok) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            fail(ErrorCode::InvalidArgument, "not a number: '" + tok + "'");
        }
    }
    return out;
}

const std::vector<std::string> kSuffixes = {"_mask", "_pred", "_bone"};

std::string strip_ext(std::string name) {
    for (const std::string e : {".nii", ".raw"})
        if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0) return name.substr(0, name.size() - e.size());
    return name;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_volume_file(const fs::path& p) { return p.extension() == ".nii" || p.extension() == ".raw"; }

/// Image plus companion mask/bone files when present next to it.
VolumeBundle load_bundle(const fs::path& path) {
    VolumeBundle b = read_volume_file(path);
    const auto mask = companion_path(path, "mask"), bone = companion_path(path, "bone");
    if (!b.mask && fs::exists(mask)) b.mask = read_label_file(mask);
    if (!b.bone && fs::exists(bone)) b.bone = read_label_file(bone, {"background", "bone"});
    b.validate();
    return b;
}

struct Item {
    std::string id;
    VolumeBundle bundle;
};

std::vector<Item> load_items(const std::vector<std::string>& volumes, const std::string& manifest, const std::string& split,
                             const std::string& reference) {
    std::vector<Item> items;
    if (!manifest.empty()) {
        const Manifest m = read_manifest(manifest);
        for (const auto& e : m.volumes)
            if (split == "all" || e.split == split) items.push_back({e.id, load_manifest_volume(m, e)});
        if (items.empty()) fail(ErrorCode::DatasetError, "manifest has no volumes in split '" + split + "'");
    }
    for (const auto& v : volumes) items.push_back({strip_ext(fs::path(v).filename().string()), load_bundle(v)});
    if (!reference.empty()) {
        if (items.size() != 1) fail(ErrorCode::InvalidArgument, "--reference needs exactly one volume");
        items[0].bundle.mask = read_label_file(reference);
        items[0].bundle.validate();
    }
    if (items.empty()) fail(ErrorCode::InvalidArgument, "no input volumes (use --volume or --manifest)");
    return items;
}

Vec3 extent_of(const Geometry& g) {
    return {g.spacing[0] * static_cast<double>(g.dims[0]), g.spacing[1] * static_cast<double>(g.dims[1]),
            g.spacing[2] * static_cast<double>(g.dims[2])};
}

/// Resamples in-plane to the model's slice size over the same field of view.
VolumeBundle to_model_grid(const VolumeBundle& b, int slice_size) {
    const auto& d = b.image.geometry.dims;
    const auto s = static_cast<std::size_t>(slice_size);
    if (d[1] == s && d[2] == s) return b;
    return standardize_fov(b, extent_of(b.image.geometry), {d[0], s, s});
}

Checkpoint load_checkpoint_arg(const std::string& path) {
    if (path.empty()) fail(ErrorCode::InvalidArgument, "--checkpoint is required");
    if (!fs::exists(path)) fail(ErrorCode::InvalidArgument, "checkpoint " + path + " does not exist");
    return load_checkpoint(path);
}

std::string class_name_of(const LabelMask& m, int k) {
    return static_cast<std::size_t>(k) < m.class_names.size() ? m.class_names[static_cast<std::size_t>(k)] : "class_" + std::to_string(k);
}

std::string records_csv(const std::vector<MetricRecord>& records) {
    std::ostringstream out;
    out << "dataset,model,class,metric,value,volume\n";
    for (const auto& r : records)
        out << csv_escape(r.dataset) << ',' << csv_escape(r.model) << ',' << csv_escape(r.class_name) << ','
            << csv_escape(r.metric) << ',' << format_exact(r.value) << ',' << csv_escape(r.volume_id) << '\n';
    return out.str();
}

std::vector<MetricRecord> parse_records_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.rfind("dataset,model,class,metric,value,volume", 0) != 0)
        fail(ErrorCode::UnsupportedFormat, "records CSV header missing");
    std::vector<MetricRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 6) fail(ErrorCode::UnsupportedFormat, "records CSV row needs 6 fields: " + line);
        try {
            out.push_back({f[0], f[1], f[2], f[3], std::stod(f[4]), f[5]});
        } catch (const std::exception&) {
            fail(ErrorCode::UnsupportedFormat, "bad number in records CSV row: " + line);
        }
    }
    return out;
}

/// Summary, significance markers and the rendered tables for a set of records.
void write_report(const fs::path& out, const std::vector<MetricRecord>& records, std::string reference, const std::string& title) {
    Summary summary = aggregate(records);
    for (const auto& w : summary.warnings) std::cerr << "warning: " << w << '\n';
    json stats = json::array();
    if (reference.empty() && !summary.rows.empty()) reference = summary.rows.front().model;
    for (const auto& c : mark_significance(summary, records, reference))
        stats.push_back({{"dataset", c.dataset}, {"class", c.class_name}, {"metric", c.metric}, {"model", c.model},
                         {"reference", c.reference}, {"statistic", c.test.statistic}, {"p_value", c.test.p_value},
                         {"method", to_string(c.test.method)}, {"n1", c.test.n1}, {"n2", c.test.n2},
                         {"marker", significance_marker(c.test.p_value)}});
    write_text(out / "records.csv", records_csv(records));
    write_text(out / "summary.csv", render_csv(summary.rows));
    write_text(out / "table.csv", render_table_csv(summary.rows));
    write_text(out / "report.html", render_html(summary.rows, title));
    write_text(out / "stats.json", stats.dump(2) + "\n");
}

void write_timing(const fs::path& path, const json& timing) { write_text(path, timing.dump(2) + "\n"); }

// ---------------------------------------------------------------- commands

int cmd_phantom(RunConfig& cfg, const std::string& out, const std::string& spec_path) {
    if (!spec_path.empty()) {
        std::ifstream in(spec_path);
        if (!in) fail(ErrorCode::SpecError, "cannot open spec " + spec_path);
        json spec = json::parse(in, nullptr, false);
        if (spec.is_discarded() || !spec.is_object()) fail(ErrorCode::SpecError, "spec " + spec_path + " is not a JSON object");
        for (const auto& [k, v] : spec.items()) {
            const std::string key = k.rfind("phantom.", 0) == 0 ? k : "phantom." + k;
            try {
                cfg.set(key, v);
            } catch (const Error& e) {
                fail(ErrorCode::SpecError, "spec field '" + k + "': " + e.what());
            }
        }
    }
    const auto ranges = cfg.section<CorpusRanges>("phantom");
    ranges.validate();
    const long long n = cfg["phantom.n"].get<long long>();
    if (n < 1) fail(ErrorCode::SpecError, "n must be >= 1");
    const Manifest m = generate_corpus(static_cast<std::size_t>(n), ranges, seed_of(cfg), out);
    cfg.echo(fs::path(out) / "config.json");
    std::cout << "wrote " << m.volumes.size() << " volumes and manifest.json to " << out << '\n';
    return 0;
}

int cmd_convert(RunConfig& cfg, const std::string& in, const std::string& out) {
    VolumeBundle b = load_bundle(in);
    const auto fov = cfg["convert.fov"], dims = cfg["convert.dims"];
    if (!fov.empty() || !dims.empty()) {
        Vec3 f = extent_of(b.image.geometry);
        Index3 d = b.image.geometry.dims;
        if (!fov.empty()) {
            if (fov.size() != 3) fail(ErrorCode::InvalidArgument, "convert.fov needs three values (z,y,x mm)");
            for (int a = 0; a < 3; ++a) f[a] = fov[static_cast<std::size_t>(a)].get<double>();
        }
        if (!dims.empty()) {
            if (dims.size() != 3) fail(ErrorCode::InvalidArgument, "convert.dims needs three values (z,y,x)");
            for (int a = 0; a < 3; ++a) d[a] = dims[static_cast<std::size_t>(a)].get<std::size_t>();
        }
        b = standardize_fov(b, f, d);
    }
    const fs::path dst(out);
    if (dst.has_parent_path()) ensure_dir(dst.parent_path());
    write_volume_file(b, dst, parse_dtype(cfg["convert.dtype"].get<std::string>()));
    cfg.echo(fs::path(out + ".config.json"));
    return 0;
}

Dataset load_training_data(const std::string& manifest_path, int slice_size) {
    const Manifest m = read_manifest(manifest_path);
    Dataset d;
    for (const auto& e : m.volumes) {
        auto b = std::make_shared<const VolumeBundle>(to_model_grid(load_manifest_volume(m, e), slice_size));
        if (e.split == "train") d.train.push_back({e.id, b});
        else if (e.split == "val") d.val.push_back({e.id, b});
    }
    return d;
}

int cmd_train(RunConfig& cfg, const std::string& manifest, const std::string& out, const std::string& resume_path) {
    if (manifest.empty()) fail(ErrorCode::InvalidArgument, "--manifest is required");
    ensure_dir(out);
    std::optional<Checkpoint> resume;
    if (!resume_path.empty()) {
        if (!fs::exists(resume_path)) fail(ErrorCode::InvalidArgument, "resume checkpoint " + resume_path + " does not exist");
        resume = load_checkpoint(resume_path);
        // the architecture comes from the checkpoint
        for (const auto& [k, v] : json(resume->config).items()) cfg.set("model." + k, v);
    }
    const auto mc = cfg.section<ModelConfig>("model");
    auto tc = cfg.section<TrainConfig>("train");
    tc.seed = seed_of(cfg);
    mc.validate();
    tc.validate();
    cfg.echo(fs::path(out) / "config.json");

    const Dataset data = load_training_data(manifest, mc.slice_size);
    std::cout << "training on " << data.train.size() << " volumes, validating on " << data.val.size() << " (S="
              << tc.chunk_size << ")\n";
    json timing = json::array();
    const fs::path dir(out);
    auto on_epoch = [&](const EpochLog& e, const Checkpoint& last, const Checkpoint* best) {
        save_checkpoint(last, dir / "last.ckpt");
        if (best) save_checkpoint(*best, dir / "best.ckpt");
        timing.push_back({{"epoch", e.epoch}, {"seconds", e.seconds}});
        std::printf("epoch %d  lr %.3g  loss %.4f  val_dsc %.4f%s  (%.1f s)\n", e.epoch, e.lr, e.train_loss, e.val_dsc,
                    e.improved ? " *" : "", e.seconds);
        std::fflush(stdout);
    };
    const auto result = train(data, mc, tc, resume ? &*resume : nullptr, on_epoch);
    if (!result.best && !fs::exists(dir / "best.ckpt") && resume) save_checkpoint(*resume, dir / "best.ckpt");

    std::ostringstream log;
    log << "epoch,lr,train_loss,val_dsc\n";
    for (const auto& e : result.log)
        log << e.epoch << ',' << format_exact(e.lr) << ',' << format_exact(e.train_loss) << ',' << format_exact(e.val_dsc) << '\n';
    write_text(dir / "train_log.csv", log.str());
    write_timing(dir / "timing.json", {{"epochs", timing}});
    if (result.early_stopped) std::cout << "early stop\n";
    return 0;
}

int cmd_infer(RunConfig& cfg, const std::string& checkpoint, const std::vector<std::string>& volumes,
              const std::string& manifest, const std::string& reference, const std::string& out) {
    const Checkpoint ckpt = load_checkpoint_arg(checkpoint);
    const Model<float> model = model_from_checkpoint(ckpt);
    PropagationOptions opt;
    opt.strategy = PropagationStrategy::parse(cfg["infer.strategy"].get<std::string>());
    opt.clicks = cfg["infer.clicks"].get<int>();
    opt.seed = seed_of(cfg);
    opt.deterministic_first_click = deterministic(cfg);
    const std::string format = cfg["infer.format"].get<std::string>();
    if (format != "nii" && format != "raw") fail(ErrorCode::InvalidArgument, "infer.format must be nii or raw");
    ensure_dir(out);
    cfg.echo(fs::path(out) / "config.json");

    const auto items = load_items(volumes, manifest, cfg["infer.split"].get<std::string>(), reference);
    json timing = json::object();
    for (const auto& item : items) {
        if (!item.bundle.mask)
            fail(ErrorCode::DatasetError, "volume " + item.id + " has no reference mask to place clicks from");
        const VolumeBundle grid = to_model_grid(item.bundle, model.config.slice_size);
        const auto res = propagate(model, grid.image, *grid.mask, opt);
        LabelMask pred = res.mask;
        const Geometry& g0 = item.bundle.image.geometry;
        if (!(pred.geometry.dims == g0.dims)) {
            pred = standardize_fov(pred, extent_of(g0), g0.dims);
            pred.geometry = g0;
        }
        pred.class_names = item.bundle.mask->class_names;

        json classes = json::array();
        std::vector<ClickPrompt> clicks;
        for (const auto& tr : res.classes) {
            json c{{"class_id", tr.class_id}, {"class", class_name_of(*item.bundle.mask, tr.class_id)},
                   {"prompted_slices", tr.prompted_slices}, {"clicks", tr.clicks}};
            if (!tr.prompted_slices.empty()) {
                const auto s = score_class(pred, *item.bundle.mask, tr.class_id, item.id);
                c["dsc"] = s.dsc;
                c["iou"] = s.iou;
            }
            classes.push_back(c);
            clicks.insert(clicks.end(), tr.click_log.begin(), tr.click_log.end());
        }
        const json sidecar{{"volume", item.id},        {"strategy", opt.strategy.to_string()},
                           {"clicks_per_slice", opt.clicks}, {"total_clicks", res.total_clicks()},
                           {"classes", classes}};
        const fs::path base = fs::path(out) / item.id;
        write_label_file(pred, base.string() + "_pred." + format);
        write_text(base.string() + "_pred_metrics.json", sidecar.dump(2) + "\n");
        std::ostringstream jl;
        write_clicks_jsonl(jl, clicks);
        write_text(base.string() + "_clicks.jsonl", jl.str());
        timing[item.id] = res.seconds;
        std::printf("%s: %zu clicks, %.2f s\n", item.id.c_str(), res.total_clicks(), res.seconds);
    }
    write_timing(fs::path(out) / "timing.json", timing);
    return 0;
}

int cmd_sweep(RunConfig& cfg, const std::string& checkpoint, const std::vector<std::string>& volumes,
              const std::string& manifest, const std::string& out, bool random_init) {
    const Checkpoint ckpt = load_checkpoint_arg(checkpoint);
    Model<float> model = model_from_checkpoint(ckpt);
    std::string name = "trained";
    if (random_init) {
        model.initialize(Rng::derive(seed_of(cfg), 0x30DE1));
        name = "random_init";
    }
    std::vector<PropagationStrategy> strategies;
    for (const auto& s : split_list(cfg["sweep.strategies"].get<std::string>())) strategies.push_back(PropagationStrategy::parse(s));
    std::vector<int> budgets;
    for (double v : parse_numbers(cfg["sweep.clicks"].get<std::string>())) budgets.push_back(static_cast<int>(v));
    if (strategies.empty() || budgets.empty()) fail(ErrorCode::InvalidArgument, "sweep needs strategies and click budgets");
    ensure_dir(out);
    cfg.echo(fs::path(out) / "config.json");

    auto items = load_items(volumes, manifest, cfg["sweep.split"].get<std::string>(), "");
    std::vector<VolumeBundle> grids;
    for (const auto& it : items) {
        if (!it.bundle.mask) fail(ErrorCode::DatasetError, "volume " + it.id + " has no reference mask");
        grids.push_back(to_model_grid(it.bundle, model.config.slice_size));
    }
    std::vector<SweepCase> cases;
    for (std::size_t i = 0; i < items.size(); ++i) cases.push_back({items[i].id, &grids[i].image, &*grids[i].mask});
    const auto res = sweep_strategies(model, cases, strategies, budgets, seed_of(cfg), name, deterministic(cfg));

    std::ostringstream csv;
    csv << "strategy,clicks,class,class_id,dsc,iou,clicks_used,n\n";
    for (const auto& r : res.rows) {
        csv << r.strategy << ',' << r.clicks << ',' << csv_escape(r.class_name) << ',' << r.class_id << ',' << format_exact(r.dsc)
            << ',' << format_exact(r.iou) << ',' << format_exact(r.clicks_used) << ',' << r.n << '\n';
        std::printf("%-10s clicks %d  %-20s dsc %.3f  iou %.3f  clicks/vol %.1f\n", r.strategy.c_str(), r.clicks,
                    r.class_name.c_str(), r.dsc, r.iou, r.clicks_used);
    }
    write_text(fs::path(out) / "sweep.csv", csv.str());
    write_text(fs::path(out) / "records.csv", records_csv(res.records));
    return 0;
}

/// Finds `<id><suffix>` among volume files in `dir`, trying the given suffixes in order.
std::optional<fs::path> find_for_id(const fs::path& dir, const std::string& id, const std::vector<std::string>& suffixes) {
    for (const auto& s : suffixes)
        for (const std::string ext : {".nii", ".raw"}) {
            const fs::path p = dir / (id + s + ext);
            if (fs::exists(p)) return p;
        }
    return std::nullopt;
}

std::vector<std::pair<std::string, fs::path>> reference_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) fail(ErrorCode::InvalidArgument, "reference directory " + dir.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && is_volume_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<std::pair<std::string, fs::path>> masks, plain;
    for (const auto& f : files) {
        const std::string stem = strip_ext(f.filename().string());
        if (ends_with(stem, "_mask")) masks.emplace_back(stem.substr(0, stem.size() - 5), f);
        else if (!ends_with(stem, "_bone") && !ends_with(stem, "_pred")) plain.emplace_back(stem, f);
    }
    return masks.empty() ? plain : masks;
}

int cmd_eval(RunConfig& cfg, const std::vector<std::string>& preds, const std::string& ref_dir, const std::string& bone_dir,
             const std::string& out) {
    if (preds.empty()) fail(ErrorCode::InvalidArgument, "--pred is required");
    std::vector<std::pair<std::string, fs::path>> arms;
    for (const auto& p : preds) {
        const auto eq = p.find('=');
        if (eq != std::string::npos) arms.emplace_back(p.substr(0, eq), p.substr(eq + 1));
        else arms.emplace_back(fs::path(p).lexically_normal().filename().string(), p);
        if (arms.back().first.empty()) arms.back().first = "pred";
        if (!fs::is_directory(arms.back().second))
            fail(ErrorCode::InvalidArgument, "prediction directory " + arms.back().second.string() + " does not exist");
    }
    const std::string dataset = cfg["eval.dataset"].get<std::string>();
    ensure_dir(out);
    cfg.echo(fs::path(out) / "config.json");

    std::vector<MetricRecord> records;
    const auto refs = reference_files(ref_dir);
    if (refs.empty()) fail(ErrorCode::DatasetError, "no reference masks in " + ref_dir);
    for (const auto& [id, ref_path] : refs) {
        const LabelMask ref = read_label_file(ref_path);
        std::optional<LabelMask> bone;
        if (!bone_dir.empty()) {
            if (const auto bp = find_for_id(bone_dir, id, {"_bone", ""})) bone = read_label_file(*bp, {"background", "bone"});
            else std::cerr << "warning: no bone mask for " << id << ", thickness skipped\n";
        }
        for (const auto& [arm, dir] : arms) {
            const auto pp = find_for_id(dir, id, {"_pred", "_mask", ""});
            if (!pp) fail(ErrorCode::DatasetError, "arm " + arm + " has no prediction for " + id);
            LabelMask pred = read_label_file(*pp);
            if (!(pred.geometry.dims == ref.geometry.dims)) fail(ErrorCode::DimensionError, "prediction for " + id + " has other dims");
            for (std::size_t k = 1; k < ref.class_count(); ++k) {
                bool present = false;
                for (auto v : ref.labels) present |= v == k;
                if (!present) continue;
                const std::string name = class_name_of(ref, static_cast<int>(k));
                const auto s = score_class(pred, ref, static_cast<int>(k), id);
                records.push_back({dataset, arm, name, "dsc", s.dsc, id});
                records.push_back({dataset, arm, name, "iou", s.iou, id});
                if (!bone) continue;
                try {
                    records.push_back({dataset, arm, name, "aae_mm", thickness_error(pred, ref, *bone, static_cast<int>(k)), id});
                } catch (const Error& e) {
                    if (e.code() != ErrorCode::MeasurementUnavailable) throw;
                }
            }
        }
    }
    write_report(out, records, cfg["eval.reference"].get<std::string>(), "Segmentation metrics");
    std::cout << "evaluated " << refs.size() << " volumes x " << arms.size() << " arm(s); report in " << out << '\n';
    return 0;
}

int cmd_thickness(const std::string& mask_path, const std::string& bone_path, const std::vector<int>& classes, bool values,
                  const std::string& out) {
    const LabelMask mask = read_label_file(mask_path);
    const LabelMask bone = read_label_file(bone_path, {"background", "bone"});
    std::vector<int> ks = classes;
    if (ks.empty())
        for (std::size_t k = 1; k < mask.class_count(); ++k)
            if (std::find(mask.labels.begin(), mask.labels.end(), k) != mask.labels.end()) ks.push_back(static_cast<int>(k));
    json report = json::object();
    for (int k : ks) {
        const std::string name = class_name_of(mask, k);
        try {
            report[name] = to_json(measure_thickness(mask, k, bone), values);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::EmptyStructure && e.code() != ErrorCode::NoBoneInterface) throw;
            report[name] = {{"error", std::string(to_string(e.code()))}, {"message", e.what()}};
        }
    }
    const std::string text = report.dump(2) + "\n";
    if (out.empty()) std::cout << text;
    else write_text(out, text);
    return 0;
}

int cmd_stats(const std::string& a, const std::string& b, const std::string& a_file, const std::string& b_file,
              const std::string& out) {
    const auto xs = parse_numbers(a_file.empty() ? a : read_text(a_file));
    const auto ys = parse_numbers(b_file.empty() ? b : read_text(b_file));
    const auto r = wilcoxon_ranksum(xs, ys);
    const json j{{"statistic", r.statistic}, {"p_value", r.p_value}, {"method", to_string(r.method)},
                 {"n1", r.n1},               {"n2", r.n2},           {"marker", significance_marker(r.p_value)}};
    const std::string text = j.dump(2) + "\n";
    if (out.empty()) std::cout << text;
    else write_text(out, text);
    return 0;
}

int cmd_bench(RunConfig& cfg, const std::string& checkpoint, const std::vector<std::string>& volumes,
              const std::string& manifest, const std::string& out) {
    const Checkpoint ckpt = load_checkpoint_arg(checkpoint);
    const Model<float> model = model_from_checkpoint(ckpt);
    PropagationOptions opt;
    opt.strategy = PropagationStrategy::parse(cfg["bench.strategy"].get<std::string>());
    opt.clicks = cfg["bench.clicks"].get<int>();
    opt.seed = seed_of(cfg);
    opt.deterministic_first_click = deterministic(cfg);
    const int reps = cfg["bench.repetitions"].get<int>();
    if (reps < 1) fail(ErrorCode::InvalidArgument, "bench.repetitions must be >= 1");
    auto items = load_items(volumes, manifest, cfg["bench.split"].get<std::string>(), "");
    std::vector<VolumeBundle> grids;
    for (const auto& it : items) {
        if (!it.bundle.mask) fail(ErrorCode::DatasetError, "volume " + it.id + " has no reference mask");
        grids.push_back(to_model_grid(it.bundle, model.config.slice_size));
    }

    std::vector<double> per_rep;
    std::vector<std::vector<std::uint8_t>> first;
    bool identical = true;
    for (int r = 0; r < reps; ++r) {
        double total = 0.0;
        for (std::size_t i = 0; i < grids.size(); ++i) {
            const auto res = propagate(model, grids[i].image, *grids[i].mask, opt);
            total += res.seconds;
            if (r == 0) first.push_back(res.mask.labels);
            else identical &= first[i] == res.mask.labels;
        }
        per_rep.push_back(total / static_cast<double>(grids.size()));
    }
    const auto [mean, sd] = mean_and_population_std(per_rep);
    const json j{{"parameter_count", model.parameter_count()},
                 {"volumes", grids.size()},
                 {"repetitions", reps},
                 {"strategy", opt.strategy.to_string()},
                 {"seconds_per_volume_mean", mean},
                 {"seconds_per_volume_std", sd},
                 {"seconds_per_volume_by_repetition", per_rep},
                 {"masks_identical", identical}};
    if (!out.empty()) {
        ensure_dir(out);
        cfg.echo(fs::path(out) / "config.json");
        write_text(fs::path(out) / "bench.json", j.dump(2) + "\n");
    }
    std::printf("%.3f +/- %.3f s/volume over %d repetition(s), %zu parameters%s\n", mean, sd, reps, model.parameter_count(),
                identical ? "" : " (masks differ between repetitions)");
    return 0;
}

int cmd_report(RunConfig& cfg, const std::vector<std::string>& inputs, const std::string& out) {
    if (inputs.empty()) fail(ErrorCode::InvalidArgument, "--records is required");
    std::vector<MetricRecord> records;
    for (const auto& f : inputs) {
        const auto part = parse_records_csv(read_text(f));
        records.insert(records.end(), part.begin(), part.end());
    }
    ensure_dir(out);
    cfg.echo(fs::path(out) / "config.json");
    write_report(out, records, cfg["report.reference"].get<std::string>(), cfg["report.title"].get<std::string>());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Interactive memory-propagation segmentation toolkit"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed = 0;
    app.add_option("--config", g.config_path, "JSON config with flat dotted keys");
    auto* seed_opt = app.add_option("--seed", seed, "Random seed");
    app.add_flag("--deterministic", g.deterministic, "Deterministic clicks and replayable outputs");
    app.add_option("--threads", g.threads, "Worker thread bound");
    app.add_option("--set", g.sets, "Override a config key: key=value")->take_all();

    // flags bound to config keys
    std::vector<std::pair<CLI::Option*, std::string>> bound;
    std::map<std::string, std::string> flag_values;
    auto bind = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
        bound.emplace_back(sub->add_option(flag, flag_values[key], help), key);
    };

    std::string out, manifest, checkpoint, reference, resume, spec, mask_path, bone_path, ref_dir, bone_dir;
    std::string in_path, a, b, a_file, b_file, hss;
    std::vector<std::string> volumes, preds, record_files;
    std::vector<int> classes;
    bool random_init = false, values = false, no_augment = false;

    auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom corpus");
    phantom->add_option("--out", out, "Output directory")->required();
    phantom->add_option("--spec", spec, "JSON file of corpus ranges");
    bind(phantom, "--n", "phantom.n", "Number of volumes");

    auto* convert = app.add_subcommand("convert", "Convert or standardize a volume");
    convert->add_option("input", in_path, "Input volume (.nii or .raw)")->required();
    convert->add_option("output", out, "Output volume (.nii or .raw)")->required();
    bind(convert, "--fov", "convert.fov", "Target field of view z,y,x in mm");
    bind(convert, "--dims", "convert.dims", "Target grid z,y,x");
    bind(convert, "--dtype", "convert.dtype", "Output datatype (u8, i16, f32)");

    auto* train_cmd = app.add_subcommand("train", "Train a model on a manifest");
    train_cmd->add_option("--manifest", manifest, "Corpus manifest")->required();
    train_cmd->add_option("--out", out, "Output directory")->required();
    train_cmd->add_option("--resume", resume, "Checkpoint to resume from");
    train_cmd->add_option("--hss", hss, "on: chunks of train.chunk_size slices; off: single slices")->check(CLI::IsMember({"on", "off"}));
    train_cmd->add_flag("--no-augment", no_augment, "Disable augmentation");
    bind(train_cmd, "--epochs", "train.max_epochs", "Maximum epochs");
    bind(train_cmd, "--lr", "train.lr0", "Initial learning rate");
    bind(train_cmd, "--chunk-size", "train.chunk_size", "Slices per chunk");
    bind(train_cmd, "--max-clicks", "train.max_clicks", "Clicks per training session");
    bind(train_cmd, "--early-stop", "train.early_stop", "Epochs without improvement before stopping");

    auto* infer = app.add_subcommand("infer", "Segment volumes with simulated clicks");
    infer->add_option("--checkpoint", checkpoint, "Model checkpoint");
    infer->add_option("--volume", volumes, "Input volume (companion _mask file supplies clicks)");
    infer->add_option("--manifest", manifest, "Corpus manifest");
    infer->add_option("--reference", reference, "Reference mask for a single --volume");
    infer->add_option("--out", out, "Output directory")->required();
    bind(infer, "--strategy", "infer.strategy", "all or every:K");
    bind(infer, "--clicks", "infer.clicks", "Clicks per prompted slice");
    bind(infer, "--split", "infer.split", "Manifest split (train, val, all)");
    bind(infer, "--format", "infer.format", "Mask format (nii or raw)");

    auto* sweep = app.add_subcommand("sweep", "Compare propagation strategies and click budgets");
    sweep->add_option("--checkpoint", checkpoint, "Model checkpoint");
    sweep->add_option("--volume", volumes, "Input volume");
    sweep->add_option("--manifest", manifest, "Corpus manifest");
    sweep->add_option("--out", out, "Output directory")->required();
    sweep->add_flag("--random-init", random_init, "Use freshly initialized weights of the same architecture");
    bind(sweep, "--strategies", "sweep.strategies", "Comma-separated strategies");
    bind(sweep, "--clicks", "sweep.clicks", "Comma-separated click budgets");
    bind(sweep, "--split", "sweep.split", "Manifest split");

    auto* eval = app.add_subcommand("eval", "Score predictions against references");
    eval->add_option("--pred", preds, "Prediction directory, optionally name=dir; repeat for several arms")->required();
    eval->add_option("--ref", ref_dir, "Reference mask directory")->required();
    eval->add_option("--bone", bone_dir, "Bone mask directory for thickness error");
    eval->add_option("--out", out, "Output directory")->required();
    bind(eval, "--dataset", "eval.dataset", "Dataset label");
    bind(eval, "--reference-arm", "eval.reference", "Arm the others are tested against");

    auto* thick = app.add_subcommand("thickness", "Cartilage thickness from a mask and a bone mask");
    thick->add_option("--mask", mask_path, "Cartilage label mask")->required();
    thick->add_option("--bone", bone_path, "Bone mask")->required();
    thick->add_option("--class", classes, "Class ids (default: all present)");
    thick->add_flag("--values", values, "Include per-point values");
    thick->add_option("--out", out, "Output JSON (default stdout)");

    auto* stats = app.add_subcommand("stats", "Wilcoxon rank-sum test of two samples");
    stats->add_option("--a", a, "First sample, comma-separated");
    stats->add_option("--b", b, "Second sample, comma-separated");
    stats->add_option("--a-file", a_file, "First sample, one value per line");
    stats->add_option("--b-file", b_file, "Second sample, one value per line");
    stats->add_option("--out", out, "Output JSON (default stdout)");

    auto* bench = app.add_subcommand("bench", "Inference timing");
    bench->add_option("--checkpoint", checkpoint, "Model checkpoint");
    bench->add_option("--volume", volumes, "Input volume");
    bench->add_option("--manifest", manifest, "Corpus manifest");
    bench->add_option("--out", out, "Output directory");
    bind(bench, "--repetitions", "bench.repetitions", "Repetitions");
    bind(bench, "--strategy", "bench.strategy", "all or every:K");
    bind(bench, "--clicks", "bench.clicks", "Clicks per prompted slice");
    bind(bench, "--split", "bench.split", "Manifest split");

    auto* report = app.add_subcommand("report", "Tables and HTML from metric records");
    report->add_option("--records", record_files, "records.csv files")->required();
    report->add_option("--out", out, "Output directory")->required();
    bind(report, "--title", "report.title", "Report title");
    bind(report, "--reference-arm", "report.reference", "Arm the others are tested against");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (seed_opt->count()) g.seed = seed;
        CLI::App* sub = app.get_subcommands().front();
        RunConfig cfg = make_config(g, sub->get_name());
        for (const auto& [opt, key] : bound) {
            if (!opt->count()) continue;
            const std::string& v = flag_values[key];
            const json& def = cfg[key];
            if (def.is_string()) cfg.set(key, v);
            else if (def.is_array()) {
                json arr = json::array();
                for (double x : parse_numbers(v)) arr.push_back(x);
                cfg.set(key, arr);
            } else {
                json parsed = json::parse(v, nullptr, false);
                if (parsed.is_discarded()) fail(ErrorCode::InvalidArgument, opt->get_name() + ": cannot parse '" + v + "'");
                cfg.set(key, parsed);
            }
        }
        if (hss == "off") cfg.set("train.chunk_size", 1);
        if (no_augment) cfg.set("train.augment", false);

        const std::string name = sub->get_name();
        if (name == "phantom") return cmd_phantom(cfg, out, spec);
        if (name == "convert") return cmd_convert(cfg, in_path, out);
        if (name == "train") return cmd_train(cfg, manifest, out, resume);
        if (name == "infer") return cmd_infer(cfg, checkpoint, volumes, manifest, reference, out);
        if (name == "sweep") return cmd_sweep(cfg, checkpoint, volumes, manifest, out, random_init);
        if (name == "eval") return cmd_eval(cfg, preds, ref_dir, bone_dir, out);
        if (name == "thickness") return cmd_thickness(mask_path, bone_path, classes, values, out);
        if (name == "stats") return cmd_stats(a, b, a_file, b_file, out);
        if (name == "bench") return cmd_bench(cfg, checkpoint, volumes, manifest, out);
        if (name == "report") return cmd_report(cfg, record_files, out);
    } catch (const Error& e) {
        std::cerr << "memseg: " << to_string(e.code()) << ": " << e.what() << '\n';
        return exit_code(e.code());
    } catch (const std::exception& e) {
        std::cerr << "memseg: " << e.what() << '\n';
        return 3;
    }
    return 2;
}

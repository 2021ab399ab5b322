#pragma once

// Chunked training loop: HSS batches, simulated click sessions per structure,
// memory propagation inside each chunk, Adam with plateau halving and early
// stopping on validation DSC.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "memseg/augment.hpp"
#include "memseg/checkpoint.hpp"
#include "memseg/error.hpp"
#include "memseg/hss.hpp"
#include "memseg/model.hpp"
#include "memseg/optim.hpp"
#include "memseg/propagation.hpp"
#include "memseg/prompts.hpp"

namespace memseg {

struct TrainConfig {
    double lr0 = 1e-4;
    double lr_min = 1e-6;
    int plateau_epochs = 5;
    int early_stop = 10;
    int max_clicks = 8;
    int chunk_size = 8;
    std::uint64_t seed = 0;
    int max_epochs = 100;
    double prompt_prob = 0.5;   // chance a later slice of a chunk is prompted
    double weight_cap = 20.0;   // upper bound on inverse-frequency loss weights
    bool augment = true;
    AugmentConfig augmentation;
    int val_clicks = 1;
    std::string val_strategies = "all,every:10"; // validation score averages these

    std::vector<PropagationStrategy> validation_strategies() const {
        std::vector<PropagationStrategy> out;
        std::size_t start = 0;
        while (start <= val_strategies.size()) {
            const auto comma = std::min(val_strategies.find(',', start), val_strategies.size());
            out.push_back(PropagationStrategy::parse(val_strategies.substr(start, comma - start)));
            start = comma + 1;
        }
        return out;
    }

    void validate() const {
        if (!(lr0 > 0.0) || !(lr_min > 0.0) || lr_min > lr0) fail(ErrorCode::InvalidArgument, "train.lr0/lr_min invalid");
        if (plateau_epochs < 1) fail(ErrorCode::InvalidArgument, "train.plateau_epochs must be >= 1");
        if (early_stop < 1) fail(ErrorCode::InvalidArgument, "train.early_stop must be >= 1");
        if (max_clicks < 1) fail(ErrorCode::InvalidArgument, "train.max_clicks must be >= 1");
        if (chunk_size < 1) fail(ErrorCode::InvalidChunkSize, "train.chunk_size must be >= 1");
        if (max_epochs < 1) fail(ErrorCode::InvalidArgument, "train.max_epochs must be >= 1");
        if (!(prompt_prob >= 0.0 && prompt_prob <= 1.0)) fail(ErrorCode::InvalidArgument, "train.prompt_prob must lie in [0,1]");
        if (!(weight_cap >= 1.0)) fail(ErrorCode::InvalidArgument, "train.weight_cap must be >= 1");
        if (val_clicks < 1) fail(ErrorCode::InvalidArgument, "train.val_clicks must be >= 1");
        validation_strategies();
        augmentation.validate();
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, lr0, lr_min, plateau_epochs, early_stop, max_clicks,
                                                chunk_size, seed, max_epochs, prompt_prob, weight_cap, augment,
                                                augmentation, val_clicks, val_strategies)

struct TrainVolume {
    std::string id;
    std::shared_ptr<const VolumeBundle> bundle;
};

struct Dataset {
    std::vector<TrainVolume> train;
    std::vector<TrainVolume> val;
};

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_dsc = 0.0;
    bool improved = false;
    double seconds = 0.0;
};

inline void to_json(nlohmann::json& j, const EpochLog& e) {
    j = {{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss}, {"val_dsc", e.val_dsc}, {"improved", e.improved}};
}

struct TrainResult {
    std::optional<Checkpoint> best; // absent when a resumed run never improved
    Checkpoint last;
    std::vector<EpochLog> log;
    bool early_stopped = false;
};

/// Called after every epoch with the log line, the latest checkpoint and, when
/// the epoch improved, the new best checkpoint.
using EpochCallback = std::function<void(const EpochLog&, const Checkpoint& last, const Checkpoint* best)>;

inline Mask2D class_slice(const Mask2D& labels, int class_id) {
    Mask2D m(labels.rows, labels.cols);
    for (std::size_t i = 0; i < labels.size(); ++i) m.values[i] = labels.values[i] == class_id ? 1 : 0;
    return m;
}

/// Mean over classes of the per-class mean DSC when every validation volume
/// is segmented with `strategy` and centroid clicks.
inline double validation_dsc(const Model<float>& model, const std::vector<TrainVolume>& volumes, int clicks,
                             std::uint64_t seed, const PropagationStrategy& strategy = PropagationStrategy::all()) {
    std::map<int, std::pair<double, int>> per_class;
    for (const auto& v : volumes) {
        PropagationOptions opt;
        opt.strategy = strategy;
        opt.clicks = clicks;
        opt.seed = seed;
        opt.deterministic_first_click = true;
        const auto res = propagate(model, v.bundle->image, *v.bundle->mask, opt);
        for (const auto& tr : res.classes) {
            if (tr.prompted_slices.empty()) continue;
            const auto s = score_class(res.mask, *v.bundle->mask, tr.class_id, v.id);
            per_class[tr.class_id].first += s.dsc;
            per_class[tr.class_id].second += 1;
        }
    }
    if (per_class.empty()) return 0.0;
    double total = 0.0;
    for (const auto& [k, acc] : per_class) total += acc.first / acc.second;
    return total / static_cast<double>(per_class.size());
}

/// Average of validation_dsc over several strategies. Dense prompting alone
/// barely exercises memory, so sparse strategies keep propagation honest.
inline double validation_dsc(const Model<float>& model, const std::vector<TrainVolume>& volumes, int clicks,
                             std::uint64_t seed, const std::vector<PropagationStrategy>& strategies) {
    if (strategies.empty()) fail(ErrorCode::InvalidArgument, "no validation strategies");
    double total = 0.0;
    for (const auto& s : strategies) total += validation_dsc(model, volumes, clicks, seed, s);
    return total / static_cast<double>(strategies.size());
}

/// One optimizer step on one chunk. Banks start empty; the first appearance
/// of a structure is always prompted, later slices with probability
/// `prompt_prob`; absent structures are trained toward an empty mask.
inline double train_chunk(Model<float>& model, const Batch& batch, const ClassWeights& weights, const TrainConfig& cfg,
                          Rng& rng, AdamState& adam, double lr) {
    const ModelConfig& mc = model.config;
    model.zero_grad();
    Tape<float> tape(true);
    Graph<float> g(model, tape);
    std::vector<MemoryBank<float>> banks(static_cast<std::size_t>(mc.num_classes), MemoryBank<float>(mc.memory_capacity));
    std::vector<bool> seen(static_cast<std::size_t>(mc.num_classes), false);
    std::vector<Var<float>> losses;

    for (std::size_t i = 0; i < batch.images.size(); ++i) {
        const Image2D& img = batch.images[i];
        const Mask2D& labels = batch.labels.at(i);
        const std::size_t z = batch.slice_indices[i];
        Var<float> x = model.encode_image(g, img);
        Var<float> pix = model.pixel_features(g, img);
        for (int c = 1; c < mc.num_classes; ++c) {
            const auto ci = static_cast<std::size_t>(c);
            const Mask2D rs = class_slice(labels, c);
            bool present = false;
            for (auto v : rs.values) present |= v != 0;
            Var<float> xm = model.memory_attend(g, x, banks[ci], z);
            const bool prompted = present && (!seen[ci] || rng.bernoulli(cfg.prompt_prob));
            std::vector<ClickPrompt> clicks;
            if (prompted) {
                const int n = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_clicks)));
                clicks.push_back(first_click(rs, c, rng.next_u64(), z));
                if (n > 1) {
                    // intermediate session passes need no gradients
                    Tape<float> scratch(false);
                    Graph<float> gs(model, scratch);
                    Var<float> xs = gs.constant(xm.value()), ps = gs.constant(pix.value());
                    for (int it = 1; it < n; ++it) {
                        Var<float> lg = model.decode_mask(gs, xs, model.encode_prompts(gs, clicks, c), ps);
                        const Mask2D pred = threshold_logits(lg.value(), rs.rows, rs.cols);
                        try {
                            clicks.push_back(next_click(pred, rs, c, it, z));
                        } catch (const Error& e) {
                            if (e.code() != ErrorCode::Converged) throw;
                            break;
                        }
                    }
                }
            }
            Var<float> logits = model.decode_mask(g, xm, model.encode_prompts(g, clicks, c), pix);
            losses.push_back(ops::bce_dice_loss(logits, class_target<float>(labels, c), static_cast<float>(weights.pos[ci]),
                                                static_cast<float>(weights.neg[ci])));
            banks[ci].push(model.encode_memory(g, x, logits, z, prompted));
            if (present) seen[ci] = true;
        }
    }
    Var<float> total = ops::scale(ops::sum_all(ops::concat_rows(losses)), 1.0f / static_cast<float>(losses.size()));
    const double value = total.value()(0, 0);
    if (!std::isfinite(value)) fail(ErrorCode::DivergenceError, "non-finite loss");
    tape.backward(total);
    for (const auto& p : model.params)
        if (!p.grad.allFinite()) fail(ErrorCode::DivergenceError, "non-finite gradient in " + p.name);
    adam_step(model.params, adam, lr);
    return value;
}

namespace detail {

inline nlohmann::json schedule_json(const PlateauSchedule& s) {
    return {{"lr", s.lr},           {"best", s.best},         {"best_epoch", s.best_epoch}, {"since_best", s.since_best},
            {"since_change", s.since_change}, {"halvings", s.halvings}};
}

inline void restore_schedule(PlateauSchedule& s, const nlohmann::json& j) {
    s.lr = j.at("lr").get<double>();
    s.best = j.at("best").get<double>();
    s.best_epoch = j.at("best_epoch").get<int>();
    s.since_best = j.at("since_best").get<int>();
    s.since_change = j.at("since_change").get<int>();
    s.halvings = j.at("halvings").get<int>();
}

} // namespace detail

/// Trains from scratch (or from `resume`) and returns the best and last
/// checkpoints. Volumes must be at the model's slice size with masks.
inline TrainResult train(const Dataset& data, const ModelConfig& model_config, const TrainConfig& cfg,
                         const Checkpoint* resume = nullptr, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    const auto val_strategies = cfg.validation_strategies();
    model_config.validate();
    if (data.train.empty()) fail(ErrorCode::DatasetError, "training split is empty");
    if (data.val.empty()) fail(ErrorCode::DatasetError, "validation split is empty");
    for (const auto* split : {&data.train, &data.val})
        for (const auto& v : *split) {
            if (!v.bundle || !v.bundle->mask) fail(ErrorCode::DatasetError, "volume " + v.id + " has no label mask");
            const auto& d = v.bundle->image.geometry.dims;
            if (d[1] != static_cast<std::size_t>(model_config.slice_size) || d[2] != static_cast<std::size_t>(model_config.slice_size))
                fail(ErrorCode::DatasetError, "volume " + v.id + " slices do not match the model slice size");
        }

    Model<float> model(model_config, Rng::derive(cfg.seed, 0x30DE1));
    AdamState adam;
    PlateauSchedule sched{cfg.lr0, cfg.lr_min, cfg.plateau_epochs, cfg.early_stop};
    int first_epoch = 0;
    std::vector<const LabelMask*> masks;
    for (const auto& v : data.train) masks.push_back(&*v.bundle->mask);
    ClassWeights weights = inverse_frequency_weights(masks, model_config.num_classes, cfg.weight_cap);
    TrainResult result;

    if (resume) {
        if (!(resume->config == model_config)) fail(ErrorCode::ConfigMismatch, "resume checkpoint has a different model config");
        model = model_from_checkpoint(*resume);
        adam = resume->adam;
        first_epoch = resume->epoch + 1;
        if (resume->extra.contains("schedule")) detail::restore_schedule(sched, resume->extra["schedule"]);
        if (resume->extra.contains("class_weights")) weights = resume->extra["class_weights"].get<ClassWeights>();
        if (resume->extra.contains("log"))
            for (const auto& j : resume->extra["log"])
                result.log.push_back({j.at("epoch").get<int>(), j.at("lr").get<double>(), j.at("train_loss").get<double>(),
                                      j.at("val_dsc").get<double>(), j.at("improved").get<bool>(), 0.0});
        if (sched.since_best >= cfg.early_stop) {
            result.early_stopped = true;
            result.last = *resume;
            return result;
        }
    }

    // augmented copies are cached per (volume, epoch), normalized after augmentation
    std::vector<VolumeExtent> extents;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < data.train.size(); ++i) {
        extents.push_back({data.train[i].id, data.train[i].bundle->image.geometry.dims[0]});
        index[data.train[i].id] = i;
    }
    std::vector<TrainVolume> val;
    for (const auto& v : data.val) val.push_back(v);
    const auto chunks = make_chunks(extents, cfg.chunk_size);
    AugmentConfig aug = cfg.augment ? cfg.augmentation : AugmentConfig::disabled();
    if (aug.seed == 0) aug.seed = Rng::derive(cfg.seed, 0xA0);

    auto make_extra = [&]() {
        nlohmann::json log = nlohmann::json::array();
        for (const auto& e : result.log) log.push_back(e);
        return nlohmann::json{{"train_config", cfg}, {"schedule", detail::schedule_json(sched)}, {"class_weights", weights}, {"log", log}};
    };

    for (int epoch = first_epoch; epoch < cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::map<std::string, std::shared_ptr<const VolumeBundle>> cache;
        VolumeLoader loader = [&](const std::string& id) {
            auto it = cache.find(id);
            if (it != cache.end()) return it->second;
            const std::size_t vi = index.at(id);
            VolumeBundle b = augment(*data.train[vi].bundle, aug,
                                     static_cast<std::uint64_t>(epoch) * data.train.size() + vi);
            b.image = normalize_intensity(b.image);
            auto ptr = std::make_shared<const VolumeBundle>(std::move(b));
            cache[id] = ptr;
            return ptr;
        };
        auto batches = iterate_batches(chunks, epoch_schedule(chunks, static_cast<std::uint64_t>(epoch), cfg.seed), loader);
        double loss_sum = 0.0;
        std::size_t count = 0;
        Rng rng(Rng::derive(cfg.seed, static_cast<std::uint64_t>(epoch), 0x7C));
        while (auto batch = batches.next()) {
            try {
                loss_sum += train_chunk(model, *batch, weights, cfg, rng, adam, sched.lr);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::DivergenceError) throw;
                fail(ErrorCode::DivergenceError, std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                                                     std::to_string(count) + " (volume " + batch->volume_id + ", slice " +
                                                     std::to_string(batch->slice_indices.front()) + ")");
            }
            ++count;
        }
        EpochLog line;
        line.epoch = epoch;
        line.lr = sched.lr;
        line.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(count, 1));
        line.val_dsc = validation_dsc(model, val, cfg.val_clicks, cfg.seed, val_strategies);
        const bool stop = sched.update(line.val_dsc, epoch);
        line.improved = sched.improved_at(epoch);
        line.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(line);

        result.last = make_checkpoint(model, adam, epoch, sched.best, make_extra());
        if (line.improved) result.best = result.last;
        if (on_epoch) on_epoch(line, result.last, line.improved ? &*result.best : nullptr);
        if (stop) {
            result.early_stopped = true;
            break;
        }
    }
    return result;
}

} // namespace memseg

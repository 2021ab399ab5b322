#pragma once

// Chunk-level shuffling: volumes are tiled into runs of S consecutive slices,
// run order is permuted each epoch, slice order inside a run is preserved.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "memseg/error.hpp"
#include "memseg/rng.hpp"
#include "memseg/volume.hpp"

namespace memseg {

struct Chunk {
    std::string volume_id;
    std::size_t start_slice = 0;
    std::size_t length = 0;

    bool operator==(const Chunk&) const = default;
};

struct EpochSchedule {
    std::uint64_t epoch = 0;
    std::vector<std::size_t> order;
    std::uint64_t seed = 0;
};

struct VolumeExtent {
    std::string volume_id;
    std::size_t slice_count = 0;
};

inline std::vector<Chunk> make_chunks(const std::vector<VolumeExtent>& volumes, long long chunk_size) {
    if (chunk_size <= 0) fail(ErrorCode::InvalidChunkSize, "chunk size must be >= 1, got " + std::to_string(chunk_size));
    const auto s = static_cast<std::size_t>(chunk_size);
    std::vector<Chunk> chunks;
    for (const auto& v : volumes) {
        if (v.slice_count == 0) fail(ErrorCode::InvalidArgument, "volume " + v.volume_id + " has no slices");
        for (std::size_t start = 0; start < v.slice_count; start += s)
            chunks.push_back({v.volume_id, start, std::min(s, v.slice_count - start)});
    }
    return chunks;
}

inline EpochSchedule epoch_schedule(const std::vector<Chunk>& chunks, std::uint64_t epoch, std::uint64_t seed) {
    if (chunks.empty()) fail(ErrorCode::EmptySchedule, "cannot schedule an empty chunk list");
    EpochSchedule schedule{epoch, std::vector<std::size_t>(chunks.size()), seed};
    std::iota(schedule.order.begin(), schedule.order.end(), std::size_t{0});
    Rng rng(Rng::derive(seed, epoch, 0x455));
    rng.shuffle(std::span<std::size_t>(schedule.order));
    return schedule;
}

struct Batch {
    std::string volume_id;
    std::vector<std::size_t> slice_indices;
    std::vector<Image2D> images;
    std::vector<Mask2D> labels; // multi-class label slices; empty when the volume has no mask
    std::shared_ptr<const VolumeBundle> source;
};

using VolumeLoader = std::function<std::shared_ptr<const VolumeBundle>(const std::string& volume_id)>;

/// Single-consumer stream of one chunk per batch, in schedule order.
class BatchIterator {
public:
    BatchIterator(const std::vector<Chunk>& chunks, EpochSchedule schedule, VolumeLoader loader)
        : chunks_(chunks), schedule_(std::move(schedule)), loader_(std::move(loader)) {
        if (schedule_.order.size() != chunks_.size())
            fail(ErrorCode::InvalidArgument, "schedule does not match chunk list");
    }

    std::optional<Batch> next() {
        if (pos_ >= schedule_.order.size()) return std::nullopt;
        const Chunk& chunk = chunks_.at(schedule_.order[pos_++]);
        std::shared_ptr<const VolumeBundle> bundle;
        try {
            bundle = loader_(chunk.volume_id);
        } catch (const std::exception& e) {
            fail(ErrorCode::LoaderError, "volume " + chunk.volume_id + ": " + e.what());
        }
        if (!bundle) fail(ErrorCode::LoaderError, "volume " + chunk.volume_id + ": loader returned nothing");
        if (chunk.start_slice + chunk.length > bundle->image.geometry.dims[0])
            fail(ErrorCode::LoaderError, "volume " + chunk.volume_id + ": chunk exceeds slice count");

        Batch b;
        b.volume_id = chunk.volume_id;
        b.source = bundle;
        for (std::size_t z = chunk.start_slice; z < chunk.start_slice + chunk.length; ++z) {
            b.slice_indices.push_back(z);
            b.images.push_back(extract_slice(bundle->image, z));
            if (bundle->mask) {
                const auto& m = *bundle->mask;
                Mask2D s(m.geometry.dims[1], m.geometry.dims[2]);
                const std::size_t n = s.size();
                std::copy_n(m.labels.begin() + static_cast<std::ptrdiff_t>(z * n), n, s.values.begin());
                b.labels.push_back(std::move(s));
            }
        }
        return b;
    }

    std::size_t remaining() const { return schedule_.order.size() - pos_; }

private:
    const std::vector<Chunk>& chunks_;
    EpochSchedule schedule_;
    VolumeLoader loader_;
    std::size_t pos_ = 0;
};

inline BatchIterator iterate_batches(const std::vector<Chunk>& chunks, EpochSchedule schedule, VolumeLoader loader) {
    return BatchIterator(chunks, std::move(schedule), std::move(loader));
}

} // namespace memseg

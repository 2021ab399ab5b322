#include <map>
#include <random>

#include <gtest/gtest.h>

#include "memseg/hss.hpp"

using namespace memseg;

namespace {

std::vector<VolumeExtent> random_extents(std::mt19937_64& gen) {
    std::vector<VolumeExtent> v;
    const auto n = 1 + gen() % 6;
    for (std::size_t i = 0; i < n; ++i) v.push_back({"v" + std::to_string(i), 1 + gen() % 40});
    return v;
}

} // namespace

TEST(Chunks, TwoVolumesOfTenSlicesWithChunkFour) {
    const auto chunks = make_chunks({{"a", 10}, {"b", 10}}, 4);
    ASSERT_EQ(chunks.size(), 6u);
    EXPECT_EQ(chunks[2], (Chunk{"a", 8, 2}));
    EXPECT_EQ(chunks[5], (Chunk{"b", 8, 2}));
}

TEST(Chunks, RejectsNonPositiveSize) {
    for (long long s : {0LL, -3LL}) {
        try {
            make_chunks({{"a", 10}}, s);
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::InvalidChunkSize);
        }
    }
}

TEST(Schedule, EmptyThrows) {
    try {
        epoch_schedule({}, 0, 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptySchedule);
    }
}

TEST(Schedule, CoverageIsExactAndChunksAscend) {
    std::mt19937_64 gen(4);
    for (int trial = 0; trial < 300; ++trial) {
        const auto vols = random_extents(gen);
        const long long s = 1 + static_cast<long long>(gen() % 12);
        const auto chunks = make_chunks(vols, s);
        const auto sched = epoch_schedule(chunks, gen() % 5, gen());
        std::map<std::string, std::vector<int>> seen;
        for (const auto& v : vols) seen[v.volume_id].assign(v.slice_count, 0);
        for (auto idx : sched.order) {
            const auto& c = chunks.at(idx);
            ASSERT_LE(c.length, std::size_t(s));
            for (std::size_t z = c.start_slice; z < c.start_slice + c.length; ++z) ++seen[c.volume_id].at(z);
        }
        for (const auto& [id, counts] : seen)
            for (int k : counts) ASSERT_EQ(k, 1) << id;
    }
}

TEST(Schedule, SameSeedSameOrderDifferentEpochDiffers) {
    std::vector<VolumeExtent> vols;
    for (int i = 0; i < 10; ++i) vols.push_back({"v" + std::to_string(i), 64});
    const auto chunks = make_chunks(vols, 8);
    EXPECT_EQ(epoch_schedule(chunks, 3, 9).order, epoch_schedule(chunks, 3, 9).order);
    EXPECT_NE(epoch_schedule(chunks, 3, 9).order, epoch_schedule(chunks, 4, 9).order);
}

TEST(Schedule, ChunkOneIsPerSliceShuffle) {
    const auto chunks = make_chunks({{"a", 30}, {"b", 30}}, 1);
    ASSERT_EQ(chunks.size(), 60u);
    const auto sched = epoch_schedule(chunks, 0, 1);
    // consecutive slices of a volume end up non-adjacent somewhere
    int adjacent = 0;
    for (std::size_t i = 1; i < sched.order.size(); ++i) {
        const auto& p = chunks[sched.order[i - 1]];
        const auto& q = chunks[sched.order[i]];
        adjacent += p.volume_id == q.volume_id && q.start_slice == p.start_slice + 1;
    }
    EXPECT_LT(adjacent, 10);
}

TEST(Batches, SlicesInOrderAndLoaderErrorsWrapped) {
    Geometry g{{10, 2, 2}, {1, 1, 1}, {0, 0, 0}};
    auto bundle = std::make_shared<VolumeBundle>();
    bundle->image = Volume(g);
    for (std::size_t z = 0; z < 10; ++z) bundle->image.at(z, 0, 0) = double(z);
    bundle->mask = LabelMask(g, default_class_names());
    const auto chunks = make_chunks({{"a", 10}}, 4);
    auto it = iterate_batches(chunks, epoch_schedule(chunks, 0, 5), [&](const std::string&) { return bundle; });
    std::size_t total = 0;
    while (auto b = it.next()) {
        for (std::size_t i = 0; i < b->slice_indices.size(); ++i) {
            EXPECT_EQ(b->images[i](0, 0), double(b->slice_indices[i]));
            if (i) {
                EXPECT_EQ(b->slice_indices[i], b->slice_indices[i - 1] + 1);
            }
        }
        EXPECT_EQ(b->labels.size(), b->images.size());
        total += b->slice_indices.size();
    }
    EXPECT_EQ(total, 10u);

    auto bad = iterate_batches(chunks, epoch_schedule(chunks, 0, 5),
                               [](const std::string&) -> std::shared_ptr<const VolumeBundle> { throw std::runtime_error("gone"); });
    try {
        bad.next();
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::LoaderError);
    }
}

#pragma once

#include <algorithm>
#include <bit>
#include <cassert>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "cluster_store.hpp"
#include "correlation.hpp"
#include "flash_device.hpp"

namespace dynakv {

// ---------------------------------------------------------------------------
// On-flash record format: entry id (u64, little endian) followed by key and
// value as float32. Only the id is ever parsed back; the payload exists so
// the store round-trips real bytes.

inline std::uint64_t kv_record_bytes(std::size_t dim) {
    return 8 + 8 * static_cast<std::uint64_t>(dim);
}

inline std::vector<std::uint8_t> encode_kv_record(const KvEntry& e) {
    std::vector<std::uint8_t> b;
    b.reserve(kv_record_bytes(e.key.size()));
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(e.id >> (8 * i)));
    auto put_f32 = [&](double x) {
        const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(x));
        for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    };
    for (double x : e.key) put_f32(x);
    for (double x : e.value) put_f32(x);
    return b;
}

inline EntryId decode_record_id(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw std::invalid_argument("record too short");
    EntryId id = 0;
    for (int i = 0; i < 8; ++i) id |= static_cast<EntryId>(bytes[i]) << (8 * i);
    return id;
}

// ---------------------------------------------------------------------------

struct LayoutConfig {
    std::uint64_t record_bytes = 0;  // fixed per experiment, required
    std::size_t hot_buffers = 64;    // page buffers available per layout
    // Pool partners are fetched with one bridged command when the dead gap
    // between them costs less than a command setup; UINT64_MAX = derive from
    // the device crossover point.
    std::uint64_t bridge_gap_bytes = UINT64_MAX;
    double pool_safety = 2.0;  // max_cluster_bytes = safety * largest initial cluster
};

struct FetchResult {
    IoStats delta;
    std::uint64_t live_bytes = 0;   // bytes of requested clusters' records
    std::uint64_t slack_bytes = 0;  // covered dead bytes (gaps, pads, tombstones)
    std::vector<std::uint64_t> command_lengths;
    std::vector<Extent> extents;     // as issued, pre-merge
    std::vector<std::uint8_t> data;  // concatenated per `extents`
};

struct WriteAccounting {
    std::uint64_t flush_logical = 0;  // whole-page buffered flushes
    std::uint64_t flush_physical = 0;
    std::uint64_t direct_logical = 0;  // unbuffered appends
    std::uint64_t direct_physical = 0;
    std::uint64_t drain_logical = 0;  // partial-page buffer drains
    std::uint64_t drain_physical = 0;
    std::uint64_t bulk_logical = 0;  // placement, migration, compaction
    std::uint64_t bulk_physical = 0;
};

struct RecordLoc {
    EntryId id = 0;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

using RecordFn = std::function<std::vector<std::uint8_t>(EntryId)>;

// Cluster-to-flash mapping. Implementations serialize with the cluster store
// through the harness driver; no internal locking.
class Layout {
public:
    virtual ~Layout() = default;

    virtual void place_initial(const std::vector<PoolPair>& pairs,
                               const std::map<ClusterId, Cluster>& clusters) = 0;
    virtual void place_new_cluster(ClusterId cid, std::span<const EntryId> ids) = 0;
    virtual void append_entry(ClusterId cid, EntryId id) = 0;
    // Logical split already happened in the cluster store; relocate the bytes
    // of the new child. Returns the I/O delta including moved bytes.
    virtual IoStats apply_split(ClusterId parent, ClusterId new_cid,
                                std::span<const EntryId> new_child_ids) = 0;
    virtual std::vector<Extent> locate_cluster(ClusterId cid) const = 0;
    virtual FetchResult fetch(std::span<const ClusterId> cids) = 0;
    virtual std::uint64_t live_bytes(ClusterId cid) const = 0;
    virtual std::uint64_t total_live_bytes() const = 0;
    virtual std::uint64_t allocated_bytes() const = 0;
    virtual IoStats drain_all() = 0;
    virtual void dump(std::ostream& os) const = 0;

    const WriteAccounting& write_accounting() const { return acct_; }
    // Reads issued to relocate clusters that were not memory resident
    // (pool-overflow spills). Kept separate for I/O accounting closure.
    std::uint64_t relocation_read_bytes() const { return relocation_read_bytes_; }

protected:
    enum class WriteKind { Flush, Direct, Drain, Bulk };

    WriteAccounting acct_;
    std::uint64_t relocation_read_bytes_ = 0;

    void account_write(WriteKind kind, std::uint64_t logical, std::uint64_t physical) {
        switch (kind) {
            case WriteKind::Flush:
                acct_.flush_logical += logical;
                acct_.flush_physical += physical;
                break;
            case WriteKind::Direct:
                acct_.direct_logical += logical;
                acct_.direct_physical += physical;
                break;
            case WriteKind::Drain:
                acct_.drain_logical += logical;
                acct_.drain_physical += physical;
                break;
            case WriteKind::Bulk:
                acct_.bulk_logical += logical;
                acct_.bulk_physical += physical;
                break;
        }
    }
};

// ---------------------------------------------------------------------------
// Dual-head layout: every pool holds up to two clusters growing inward from
// opposite ends. Appends go through per-cluster page buffers so steady-state
// writes are whole aligned pages; splits keep one child in place and migrate
// only the other child's bytes. Dead bytes left by splits are covered by at
// most two extents per cluster and compacted lazily once the live fraction
// drops below one half.

class DualHeadLayout : public Layout {
public:
    DualHeadLayout(FlashDevice& dev, LayoutConfig cfg, RecordFn record_of)
        : dev_(dev), cfg_(cfg), record_of_(std::move(record_of)) {
        if (cfg_.record_bytes == 0) {
            throw std::invalid_argument("layout config: record_bytes required");
        }
        page_ = dev_.config().page_size;
        if (cfg_.bridge_gap_bytes == UINT64_MAX) {
            bridge_gap_ = dev_.config().crossover_bytes();
        } else {
            bridge_gap_ = cfg_.bridge_gap_bytes;
        }
    }

    // Each pool takes twice its larger cluster (times the safety factor), so
    // both partners can keep growing in place for a while.
    void place_initial(const std::vector<PoolPair>& pairs,
                       const std::map<ClusterId, Cluster>& clusters) override {
        for (const PoolPair& pr : pairs) {
            std::uint64_t largest = clusters.at(pr.first).members.size() * cfg_.record_bytes;
            if (pr.second) {
                largest = std::max(largest,
                                   clusters.at(*pr.second).members.size() * cfg_.record_bytes);
            }
            const std::uint64_t cap = page_ceil(static_cast<std::uint64_t>(
                2.0 * cfg_.pool_safety * static_cast<double>(std::max(largest, page_))));
            const std::size_t pool = new_pool(cap);
            bulk_place(pr.first, Side::Left, pool, clusters.at(pr.first).members);
            if (pr.second) {
                bulk_place(*pr.second, Side::Right, pool, clusters.at(*pr.second).members);
            }
        }
    }

    void place_new_cluster(ClusterId cid, std::span<const EntryId> ids) override {
        const std::uint64_t bytes = ids.size() * cfg_.record_bytes;
        auto [pool, side] = find_slot(bytes);
        std::vector<EntryId> sorted(ids.begin(), ids.end());
        std::sort(sorted.begin(), sorted.end());
        bulk_place(cid, side, pool, sorted);
    }

    void append_entry(ClusterId cid, EntryId id) override {
        const std::vector<std::uint8_t> rec = record_of_(id);
        if (rec.size() != cfg_.record_bytes) {
            throw std::invalid_argument("append_entry: unexpected record size");
        }
        if (!side_fits(placement(cid), rec.size() + page_)) {
            spill(cid);
        }
        heat_[cid] += 1;
        PageBuffer* pb = buffer_for(cid);
        if (pb == nullptr) {
            direct_write(cid, id, rec);
            return;
        }
        stage(cid, *pb, id, rec);
        flush_whole_pages(cid, *pb);
    }

    IoStats apply_split(ClusterId parent, ClusterId new_cid,
                        std::span<const EntryId> new_child_ids) override {
        IoStats delta;
        delta += drain_buffer(parent);

        Placement& pp = placement(parent);
        const std::unordered_set<EntryId> moving(new_child_ids.begin(), new_child_ids.end());
        std::vector<RecordLoc> keep, move;
        for (const Segment& seg : pp.segments) {
            for (const RecordLoc& r : seg.records) {
                (moving.count(r.id) ? move : keep).push_back(r);
            }
        }

        // The parent was memory resident for the split, so migrating bytes
        // are copied out without a new flash read.
        std::vector<std::uint8_t> blob;
        blob.reserve(move.size() * cfg_.record_bytes);
        for (const RecordLoc& r : move) {
            const auto bytes = dev_.peek({r.offset, r.length});
            blob.insert(blob.end(), bytes.begin(), bytes.end());
        }

        // New child prefers the vacant slot in the parent's pool, then any
        // existing vacant slot, and only then a fresh pool sized for it.
        std::optional<std::pair<std::size_t, Side>> target;
        {
            const PoolState& pool = pools_[pp.pool];
            const Side other = pp.side == Side::Left ? Side::Right : Side::Left;
            if (!pool.occupant[idx(other)] && fits_in_pool(pp.pool, blob.size() + 2 * page_)) {
                target = {pp.pool, other};
            }
        }
        if (!target) target = find_slot(blob.size() + 2 * page_);
        delta += install_blob(new_cid, target->first, target->second, move, blob);
        delta.moved_bytes += blob.size();
        dev_.note_moved(blob.size());

        rebuild_segments(pp, keep);
        delta += maybe_compact(parent);
        return delta;
    }

    std::vector<Extent> locate_cluster(ClusterId cid) const override {
        const Placement& pl = placement(cid);
        std::vector<Extent> out;
        for (const Segment& seg : pl.segments) {
            if (seg.end > seg.start) out.push_back({seg.start, seg.end - seg.start});
        }
        return out;
    }

    FetchResult fetch(std::span<const ClusterId> cids) override {
        FetchResult r;
        // Group requested clusters by pool so partners can be bridged.
        std::map<std::size_t, std::vector<ClusterId>> by_pool;
        for (ClusterId cid : cids) {
            by_pool[placement(cid).pool].push_back(cid);
            r.live_bytes += placement(cid).live;
        }
        for (const auto& [pool, members] : by_pool) {
            std::vector<Extent> local;
            for (ClusterId cid : members) {
                for (const Extent& e : locate_cluster(cid)) local.push_back(e);
            }
            if (local.empty()) continue;
            std::uint64_t lo = UINT64_MAX, hi = 0, covered = 0;
            for (const Extent& e : local) {
                lo = std::min(lo, e.offset);
                hi = std::max(hi, e.end());
                covered += e.length;
            }
            const std::uint64_t span = hi - lo;
            if (members.size() > 1 && span <= dev_.config().max_cmd_bytes &&
                span - covered <= bridge_gap_) {
                r.extents.push_back({lo, span});
            } else {
                for (const Extent& e : local) r.extents.push_back(e);
            }
        }
        if (!r.extents.empty()) {
            ReadResult rr = dev_.read(r.extents);
            r.delta = rr.delta;
            r.command_lengths = std::move(rr.command_lengths);
            r.data = std::move(rr.data);
        }
        r.slack_bytes = r.delta.read_bytes > r.live_bytes ? r.delta.read_bytes - r.live_bytes : 0;
        return r;
    }

    std::uint64_t live_bytes(ClusterId cid) const override { return placement(cid).live; }

    std::uint64_t total_live_bytes() const override {
        std::uint64_t total = 0;
        for (const auto& [cid, pl] : placements_) total += pl.live;
        return total;
    }

    std::uint64_t allocated_bytes() const override {
        std::uint64_t total = 0;
        for (const PoolState& p : pools_) total += p.capacity;
        return total;
    }

    IoStats drain_all() override {
        IoStats delta;
        std::vector<ClusterId> with_buffers;
        for (const auto& [cid, pb] : buffers_) with_buffers.push_back(cid);
        for (ClusterId cid : with_buffers) delta += drain_buffer(cid);
        return delta;
    }

    void dump(std::ostream& os) const override {
        for (std::size_t i = 0; i < pools_.size(); ++i) {
            const PoolState& p = pools_[i];
            auto name = [&](int side) {
                return p.occupant[side] ? std::to_string(*p.occupant[side]) : std::string("-");
            };
            os << "pool " << i << " base=" << p.base << " cap=" << p.capacity << " left="
               << name(0) << " left_fill=" << (p.stage[0] - p.base) << " right=" << name(1)
               << " right_fill=" << (p.base + p.capacity - p.stage[1]) << "\n";
        }
    }

    // Introspection for audits and tests.
    std::vector<RecordLoc> placed_records(ClusterId cid) const {
        const Placement& pl = placement(cid);
        std::vector<RecordLoc> out;
        for (const Segment& seg : pl.segments) {
            out.insert(out.end(), seg.records.begin(), seg.records.end());
        }
        std::sort(out.begin(), out.end(),
                  [](const RecordLoc& a, const RecordLoc& b) { return a.offset < b.offset; });
        return out;
    }

    std::vector<EntryId> staged_ids(ClusterId cid) const {
        std::vector<EntryId> out;
        auto it = buffers_.find(cid);
        if (it == buffers_.end()) return out;
        for (const StagedRec& r : it->second.recs) out.push_back(r.id);
        return out;
    }

    std::uint64_t pool_count() const { return pools_.size(); }

private:
    enum class Side : std::uint8_t { Left = 0, Right = 1 };
    static std::size_t idx(Side s) { return static_cast<std::size_t>(s); }

    struct Segment {
        std::uint64_t start = 0;
        std::uint64_t end = 0;  // covering range; may include dead bytes
        std::vector<RecordLoc> records;
    };

    struct Placement {
        std::size_t pool = 0;
        Side side = Side::Left;
        std::vector<Segment> segments;  // at most 2
        std::uint64_t live = 0;
    };

    struct PoolState {
        std::uint64_t base = 0;
        std::uint64_t capacity = 0;
        std::optional<ClusterId> occupant[2];
        // stage[] = next reserved byte position (left grows up, right grows
        // down); flushed[] = write edge. Staged-but-unwritten bytes sit
        // between the two.
        std::uint64_t stage[2] = {0, 0};
        std::uint64_t flushed[2] = {0, 0};
    };

    struct StagedRec {
        EntryId id = 0;
        std::vector<std::uint8_t> bytes;
        std::uint64_t offset = 0;   // absolute, assigned at stage time
        std::uint64_t flushed = 0;  // bytes already written
    };

    struct PageBuffer {
        std::vector<StagedRec> recs;  // FIFO
        std::uint64_t staged_bytes = 0;
    };

    std::uint64_t page_ceil(std::uint64_t v) const { return (v + page_ - 1) / page_ * page_; }
    std::uint64_t page_floor(std::uint64_t v) const { return v / page_ * page_; }

    Placement& placement(ClusterId cid) {
        auto it = placements_.find(cid);
        if (it == placements_.end()) throw std::out_of_range("layout: unplaced cluster");
        return it->second;
    }
    const Placement& placement(ClusterId cid) const {
        auto it = placements_.find(cid);
        if (it == placements_.end()) throw std::out_of_range("layout: unplaced cluster");
        return it->second;
    }

    std::size_t new_pool(std::uint64_t capacity) {
        PoolState p;
        p.capacity = capacity;
        p.base = dev_.alloc(capacity, page_);
        p.stage[0] = p.flushed[0] = p.base;
        p.stage[1] = p.flushed[1] = p.base + capacity;
        pools_.push_back(p);
        return pools_.size() - 1;
    }

    bool fits_in_pool(std::size_t pool, std::uint64_t bytes) const {
        const PoolState& p = pools_[pool];
        return p.stage[1] - p.stage[0] >= bytes;
    }

    bool side_fits(const Placement& pl, std::uint64_t bytes) const {
        return fits_in_pool(pl.pool, bytes);
    }

    // First vacant slot with room, else a fresh pool sized at twice the
    // incoming cluster (one slot of growth room or one future partner).
    std::pair<std::size_t, Side> find_slot(std::uint64_t bytes) {
        const std::uint64_t required = page_ceil(bytes) + 2 * page_;
        for (std::size_t i = 0; i < pools_.size(); ++i) {
            for (Side s : {Side::Left, Side::Right}) {
                if (!pools_[i].occupant[idx(s)] && fits_in_pool(i, required)) {
                    return {i, s};
                }
            }
        }
        const std::uint64_t sized =
            page_ceil(2 * std::max<std::uint64_t>(bytes, page_) + 2 * page_);
        return {new_pool(sized), Side::Left};
    }

    IoStats charged_write(WriteKind kind, std::uint64_t offset,
                          std::span<const std::uint8_t> payload) {
        IoStats delta = dev_.write(offset, payload);
        account_write(kind, delta.written_bytes, delta.physical_written_bytes);
        return delta;
    }

    // Aligns the side's cursor up to the next page boundary when there is
    // room, so subsequent buffered flushes stay page aligned. The skipped
    // bytes become covered slack.
    void align_head(PoolState& pool, Side side) {
        const std::size_t s = idx(side);
        assert(pool.stage[s] == pool.flushed[s]);
        if (side == Side::Left) {
            const std::uint64_t target = page_ceil(pool.stage[0]);
            if (target <= pool.stage[1]) pool.stage[0] = pool.flushed[0] = target;
        } else {
            const std::uint64_t target = page_floor(pool.stage[1]);
            if (target >= pool.stage[0]) pool.stage[1] = pool.flushed[1] = target;
        }
    }

    // Extends the covering segment nearest to the record; opens a second
    // segment only when the dead gap in between is large (a split left
    // tombstones between the settled span and the growth head). Small gaps
    // such as page-alignment pads are swallowed into the covering range.
    void settle_record(Placement& pl, const RecordLoc& rec) {
        pl.live += rec.length;
        const std::uint64_t rec_end = rec.offset + rec.length;
        std::size_t nearest = pl.segments.size();
        std::uint64_t nearest_gap = UINT64_MAX;
        for (std::size_t i = 0; i < pl.segments.size(); ++i) {
            const Segment& seg = pl.segments[i];
            std::uint64_t gap = 0;
            if (rec.offset > seg.end) {
                gap = rec.offset - seg.end;
            } else if (rec_end < seg.start) {
                gap = seg.start - rec_end;
            }
            if (gap < nearest_gap) {
                nearest_gap = gap;
                nearest = i;
            }
        }
        if (nearest == pl.segments.size() ||
            (nearest_gap > 2 * page_ && pl.segments.size() < 2)) {
            Segment seg;
            seg.start = rec.offset;
            seg.end = rec_end;
            seg.records.push_back(rec);
            pl.segments.push_back(seg);
        } else {
            Segment& seg = pl.segments[nearest];
            seg.start = std::min(seg.start, rec.offset);
            seg.end = std::max(seg.end, rec_end);
            seg.records.push_back(rec);
        }
        normalize_segments(pl);
    }

    void normalize_segments(Placement& pl) {
        std::sort(pl.segments.begin(), pl.segments.end(),
                  [](const Segment& a, const Segment& b) { return a.start < b.start; });
        for (std::size_t i = 0; i + 1 < pl.segments.size();) {
            if (pl.segments[i + 1].start <= pl.segments[i].end) {
                pl.segments[i].end = std::max(pl.segments[i].end, pl.segments[i + 1].end);
                pl.segments[i].records.insert(pl.segments[i].records.end(),
                                              pl.segments[i + 1].records.begin(),
                                              pl.segments[i + 1].records.end());
                pl.segments.erase(pl.segments.begin() + static_cast<std::ptrdiff_t>(i + 1));
            } else {
                ++i;
            }
        }
        // Two covering extents per cluster at most: merge the closest pair.
        while (pl.segments.size() > 2) {
            std::size_t best = 0;
            std::uint64_t best_gap = UINT64_MAX;
            for (std::size_t i = 0; i + 1 < pl.segments.size(); ++i) {
                const std::uint64_t gap = pl.segments[i + 1].start - pl.segments[i].end;
                if (gap < best_gap) {
                    best_gap = gap;
                    best = i;
                }
            }
            pl.segments[best].end = pl.segments[best + 1].end;
            pl.segments[best].records.insert(pl.segments[best].records.end(),
                                             pl.segments[best + 1].records.begin(),
                                             pl.segments[best + 1].records.end());
            pl.segments.erase(pl.segments.begin() + static_cast<std::ptrdiff_t>(best + 1));
        }
    }

    void bulk_place(ClusterId cid, Side side, std::size_t pool_id,
                    std::span<const EntryId> ids) {
        if (placements_.count(cid)) throw std::invalid_argument("cluster already placed");
        PoolState& pool = pools_[pool_id];
        pool.occupant[idx(side)] = cid;

        Placement pl;
        pl.pool = pool_id;
        pl.side = side;

        std::vector<std::uint8_t> blob;
        blob.reserve(ids.size() * cfg_.record_bytes);
        std::vector<RecordLoc> locs;
        locs.reserve(ids.size());
        const std::uint64_t total = ids.size() * cfg_.record_bytes;
        if (total > pool.stage[1] - pool.stage[0]) {
            throw std::runtime_error("layout: pool overflow during placement");
        }
        const std::uint64_t lo =
            side == Side::Left ? pool.stage[0] : pool.stage[1] - total;
        std::uint64_t pos = lo;
        for (EntryId id : ids) {
            const auto rec = record_of_(id);
            if (rec.size() != cfg_.record_bytes) {
                throw std::invalid_argument("bulk_place: unexpected record size");
            }
            blob.insert(blob.end(), rec.begin(), rec.end());
            locs.push_back({id, pos, rec.size()});
            pos += rec.size();
        }
        if (!blob.empty()) {
            charged_write(WriteKind::Bulk, lo, blob);
            Segment seg;
            seg.start = lo;
            seg.end = lo + total;
            seg.records = std::move(locs);
            pl.segments.push_back(seg);
            pl.live = total;
        }
        if (side == Side::Left) {
            pool.stage[0] = pool.flushed[0] = lo + total;
        } else {
            pool.stage[1] = pool.flushed[1] = lo;
        }
        align_head(pool, side);
        placements_.emplace(cid, std::move(pl));
    }

    // Installs already-serialized records of a migrating child.
    IoStats install_blob(ClusterId cid, std::size_t pool_id, Side side,
                         const std::vector<RecordLoc>& old_locs,
                         const std::vector<std::uint8_t>& blob) {
        if (placements_.count(cid)) throw std::invalid_argument("cluster already placed");
        PoolState& pool = pools_[pool_id];
        pool.occupant[idx(side)] = cid;

        Placement pl;
        pl.pool = pool_id;
        pl.side = side;
        IoStats delta;
        if (!blob.empty()) {
            const std::uint64_t total = blob.size();
            const std::uint64_t lo =
                side == Side::Left ? pool.stage[0] : pool.stage[1] - total;
            delta += charged_write(WriteKind::Bulk, lo, blob);
            Segment seg;
            seg.start = lo;
            seg.end = lo + total;
            std::uint64_t pos = lo;
            for (const RecordLoc& r : old_locs) {
                seg.records.push_back({r.id, pos, r.length});
                pos += r.length;
            }
            pl.segments.push_back(seg);
            pl.live = total;
            if (side == Side::Left) {
                pool.stage[0] = pool.flushed[0] = lo + total;
            } else {
                pool.stage[1] = pool.flushed[1] = lo;
            }
        }
        align_head(pool, side);
        placements_.emplace(cid, std::move(pl));
        return delta;
    }

    // --- page buffers ---

    PageBuffer* buffer_for(ClusterId cid) {
        auto it = buffers_.find(cid);
        if (it != buffers_.end()) return &it->second;
        if (cfg_.hot_buffers == 0) return nullptr;
        if (buffers_.size() < cfg_.hot_buffers) {
            align_for_buffer(cid);
            return &buffers_[cid];
        }
        // Steal the coldest buffer when this cluster is strictly hotter.
        ClusterId victim = 0;
        std::uint64_t victim_heat = UINT64_MAX;
        for (const auto& [other, pb] : buffers_) {
            const std::uint64_t h = heat_[other];
            if (h < victim_heat) {
                victim_heat = h;
                victim = other;
            }
        }
        if (heat_[cid] <= victim_heat) return nullptr;
        drain_buffer(victim);
        buffers_.erase(victim);
        align_for_buffer(cid);
        return &buffers_[cid];
    }

    void align_for_buffer(ClusterId cid) {
        Placement& pl = placement(cid);
        align_head(pools_[pl.pool], pl.side);
    }

    void stage(ClusterId cid, PageBuffer& pb, EntryId id, const std::vector<std::uint8_t>& rec) {
        Placement& pl = placement(cid);
        PoolState& pool = pools_[pl.pool];
        StagedRec sr;
        sr.id = id;
        sr.bytes = rec;
        if (pl.side == Side::Left) {
            sr.offset = pool.stage[0];
            pool.stage[0] += rec.size();
        } else {
            pool.stage[1] -= rec.size();
            sr.offset = pool.stage[1];
        }
        pb.staged_bytes += rec.size();
        pb.recs.push_back(std::move(sr));
    }

    // Writes [lo, hi) assembled from the staged stream; settles records that
    // became fully flushed.
    IoStats emit_range(ClusterId cid, PageBuffer& pb, std::uint64_t lo, std::uint64_t hi,
                       WriteKind kind) {
        Placement& pl = placement(cid);
        std::vector<std::uint8_t> buf(hi - lo, 0);
        for (StagedRec& r : pb.recs) {
            const std::uint64_t r_lo = std::max(lo, r.offset);
            const std::uint64_t r_hi = std::min(hi, r.offset + r.bytes.size());
            if (r_lo >= r_hi) continue;
            std::copy(r.bytes.begin() + static_cast<std::ptrdiff_t>(r_lo - r.offset),
                      r.bytes.begin() + static_cast<std::ptrdiff_t>(r_hi - r.offset),
                      buf.begin() + static_cast<std::ptrdiff_t>(r_lo - lo));
            r.flushed += r_hi - r_lo;
        }
        IoStats delta = charged_write(kind, lo, buf);
        pb.staged_bytes -= buf.size();
        std::vector<StagedRec> still;
        for (StagedRec& r : pb.recs) {
            if (r.flushed == r.bytes.size()) {
                settle_record(pl, {r.id, r.offset, r.bytes.size()});
            } else {
                still.push_back(std::move(r));
            }
        }
        pb.recs = std::move(still);
        return delta;
    }

    IoStats flush_whole_pages(ClusterId cid, PageBuffer& pb) {
        Placement& pl = placement(cid);
        PoolState& pool = pools_[pl.pool];
        IoStats delta;
        if (pl.side == Side::Left) {
            const std::uint64_t staged = pool.stage[0] - pool.flushed[0];
            const std::uint64_t pages = staged / page_ * page_;
            if (pages > 0) {
                delta += emit_range(cid, pb, pool.flushed[0], pool.flushed[0] + pages,
                                    WriteKind::Flush);
                pool.flushed[0] += pages;
            }
        } else {
            const std::uint64_t staged = pool.flushed[1] - pool.stage[1];
            const std::uint64_t pages = staged / page_ * page_;
            if (pages > 0) {
                delta += emit_range(cid, pb, pool.flushed[1] - pages, pool.flushed[1],
                                    WriteKind::Flush);
                pool.flushed[1] -= pages;
            }
        }
        return delta;
    }

    IoStats drain_buffer(ClusterId cid) {
        auto it = buffers_.find(cid);
        if (it == buffers_.end()) return {};
        PageBuffer& pb = it->second;
        Placement& pl = placement(cid);
        PoolState& pool = pools_[pl.pool];
        IoStats delta = flush_whole_pages(cid, pb);
        if (pl.side == Side::Left) {
            if (pool.stage[0] > pool.flushed[0]) {
                delta += emit_range(cid, pb, pool.flushed[0], pool.stage[0], WriteKind::Drain);
                pool.flushed[0] = pool.stage[0];
            }
        } else {
            if (pool.flushed[1] > pool.stage[1]) {
                delta += emit_range(cid, pb, pool.stage[1], pool.flushed[1], WriteKind::Drain);
                pool.flushed[1] = pool.stage[1];
            }
        }
        align_head(pool, pl.side);
        return delta;
    }

    void direct_write(ClusterId cid, EntryId id, const std::vector<std::uint8_t>& rec) {
        Placement& pl = placement(cid);
        PoolState& pool = pools_[pl.pool];
        std::uint64_t lo;
        if (pl.side == Side::Left) {
            lo = pool.stage[0];
            pool.stage[0] += rec.size();
            pool.flushed[0] = pool.stage[0];
        } else {
            pool.stage[1] -= rec.size();
            lo = pool.stage[1];
            pool.flushed[1] = pool.stage[1];
        }
        charged_write(WriteKind::Direct, lo, rec);
        settle_record(pl, {id, lo, rec.size()});
    }

    void rebuild_segments(Placement& pl, const std::vector<RecordLoc>& keep) {
        std::vector<Segment> old = std::move(pl.segments);
        pl.segments.clear();
        pl.live = 0;
        for (Segment& seg : old) {
            std::vector<RecordLoc> mine;
            for (const RecordLoc& r : keep) {
                if (r.offset >= seg.start && r.offset < seg.end) mine.push_back(r);
            }
            if (mine.empty()) continue;
            std::sort(mine.begin(), mine.end(),
                      [](const RecordLoc& a, const RecordLoc& b) { return a.offset < b.offset; });
            Segment ns;
            ns.start = mine.front().offset;
            ns.end = mine.back().offset + mine.back().length;
            for (const RecordLoc& r : mine) pl.live += r.length;
            ns.records = std::move(mine);
            pl.segments.push_back(ns);
        }
        normalize_segments(pl);
    }

    // Lazy compaction: once live bytes drop below half the covered range,
    // rewrite the survivors packed at the side origin.
    IoStats maybe_compact(ClusterId cid) {
        Placement& pl = placement(cid);
        std::uint64_t covered = 0;
        for (const Segment& seg : pl.segments) covered += seg.end - seg.start;
        if (covered == 0 || pl.live * 2 >= covered) return {};
        return compact(cid);
    }

    IoStats compact(ClusterId cid) {
        IoStats delta = drain_buffer(cid);
        Placement& pl = placement(cid);
        PoolState& pool = pools_[pl.pool];

        std::vector<RecordLoc> recs = placed_records(cid);
        std::vector<std::uint8_t> blob;
        blob.reserve(pl.live);
        for (const RecordLoc& r : recs) {
            const auto bytes = dev_.peek({r.offset, r.length});
            blob.insert(blob.end(), bytes.begin(), bytes.end());
        }

        const std::uint64_t total = blob.size();
        std::uint64_t lo;
        if (pl.side == Side::Left) {
            lo = pool.base;
            pool.stage[0] = pool.flushed[0] = lo + total;
        } else {
            lo = pool.base + pool.capacity - total;
            pool.stage[1] = pool.flushed[1] = lo;
        }
        pl.segments.clear();
        pl.live = 0;
        if (total > 0) {
            delta += charged_write(WriteKind::Bulk, lo, blob);
            Segment seg;
            seg.start = lo;
            seg.end = lo + total;
            std::uint64_t pos = lo;
            for (const RecordLoc& r : recs) {
                seg.records.push_back({r.id, pos, r.length});
                pos += r.length;
            }
            pl.segments.push_back(seg);
            pl.live = total;
        }
        align_head(pool, pl.side);
        delta.moved_bytes += total;
        dev_.note_moved(total);
        return delta;
    }

    // Pool overflow: relocate the growing cluster into a pool with room.
    // Unlike split migration the data may be flash resident, so this path
    // pays for its reads.
    void spill(ClusterId cid) {
        drain_buffer(cid);
        Placement& pl = placement(cid);
        PoolState& old_pool = pools_[pl.pool];

        std::vector<RecordLoc> recs = placed_records(cid);
        const auto extents = locate_cluster(cid);
        std::vector<std::uint8_t> blob;
        if (!extents.empty()) {
            ReadResult rr = dev_.read(extents);
            relocation_read_bytes_ += rr.delta.read_bytes;
            // Assemble live records from the covering read.
            blob.reserve(pl.live);
            for (const RecordLoc& r : recs) {
                std::uint64_t cursor = 0;
                for (const Extent& e : extents) {
                    if (r.offset >= e.offset && r.offset + r.length <= e.end()) {
                        const std::uint64_t at = cursor + (r.offset - e.offset);
                        blob.insert(blob.end(),
                                    rr.data.begin() + static_cast<std::ptrdiff_t>(at),
                                    rr.data.begin() +
                                        static_cast<std::ptrdiff_t>(at + r.length));
                        break;
                    }
                    cursor += e.length;
                }
            }
        }

        // Release the old slot; the partner may now grow across it.
        old_pool.occupant[idx(pl.side)] = std::nullopt;
        if (pl.side == Side::Left) {
            old_pool.stage[0] = old_pool.flushed[0] = old_pool.base;
        } else {
            old_pool.stage[1] = old_pool.flushed[1] = old_pool.base + old_pool.capacity;
        }
        placements_.erase(cid);

        auto [pool_id, side] = find_slot(blob.size() + 2 * page_);
        install_blob(cid, pool_id, side, recs, blob);
        dev_.note_moved(blob.size());
    }

    FlashDevice& dev_;
    LayoutConfig cfg_;
    RecordFn record_of_;
    std::uint64_t page_ = 4096;
    std::uint64_t bridge_gap_ = 0;
    std::vector<PoolState> pools_;
    std::map<ClusterId, Placement> placements_;
    std::map<ClusterId, PageBuffer> buffers_;
    std::map<ClusterId, std::uint64_t> heat_;
};

// ---------------------------------------------------------------------------
// Strict sequence-order layout baseline: entry i lives at slot i. Cluster
// reads degrade into one extent per run of consecutive token ids.

class SequenceLayout : public Layout {
public:
    SequenceLayout(FlashDevice& dev, LayoutConfig cfg, RecordFn record_of,
                   std::uint64_t max_entries)
        : dev_(dev), cfg_(cfg), record_of_(std::move(record_of)) {
        if (cfg_.record_bytes == 0) {
            throw std::invalid_argument("layout config: record_bytes required");
        }
        region_bytes_ = max_entries * cfg_.record_bytes;
        base_ = dev_.alloc(region_bytes_, dev_.config().page_size);
    }

    void place_initial(const std::vector<PoolPair>& pairs,
                       const std::map<ClusterId, Cluster>& clusters) override {
        (void)pairs;  // no co-location in sequence order
        std::vector<EntryId> all;
        for (const auto& [cid, cl] : clusters) {
            members_[cid] = cl.members;
            all.insert(all.end(), cl.members.begin(), cl.members.end());
        }
        std::sort(all.begin(), all.end());
        write_run(all);
    }

    void place_new_cluster(ClusterId cid, std::span<const EntryId> ids) override {
        std::vector<EntryId> sorted(ids.begin(), ids.end());
        std::sort(sorted.begin(), sorted.end());
        members_[cid] = sorted;
        write_run(sorted);
    }

    void append_entry(ClusterId cid, EntryId id) override {
        auto& m = members_[cid];
        m.insert(std::lower_bound(m.begin(), m.end(), id), id);
        const auto rec = record_of_(id);
        charged_write_direct(slot(id), rec);
    }

    IoStats apply_split(ClusterId parent, ClusterId new_cid,
                        std::span<const EntryId> new_child_ids) override {
        // Positions are fixed by token order; a split only moves metadata.
        std::unordered_set<EntryId> moving(new_child_ids.begin(), new_child_ids.end());
        auto& pm = members_[parent];
        std::vector<EntryId> keep, moved;
        for (EntryId id : pm) (moving.count(id) ? moved : keep).push_back(id);
        pm = std::move(keep);
        members_[new_cid] = std::move(moved);
        return {};
    }

    std::vector<Extent> locate_cluster(ClusterId cid) const override {
        auto it = members_.find(cid);
        if (it == members_.end()) throw std::out_of_range("layout: unplaced cluster");
        return runs_to_extents(it->second);
    }

    FetchResult fetch(std::span<const ClusterId> cids) override {
        std::vector<EntryId> ids;
        for (ClusterId cid : cids) {
            auto it = members_.find(cid);
            if (it == members_.end()) throw std::out_of_range("layout: unplaced cluster");
            ids.insert(ids.end(), it->second.begin(), it->second.end());
        }
        std::sort(ids.begin(), ids.end());
        return fetch_entries(ids);
    }

    // Per-entry retrieval in token order (the no-cluster fetch path).
    FetchResult fetch_entries(std::span<const EntryId> sorted_ids) {
        FetchResult r;
        r.extents = runs_to_extents({sorted_ids.begin(), sorted_ids.end()});
        r.live_bytes = sorted_ids.size() * cfg_.record_bytes;
        if (!r.extents.empty()) {
            ReadResult rr = dev_.read(r.extents);
            r.delta = rr.delta;
            r.command_lengths = std::move(rr.command_lengths);
            r.data = std::move(rr.data);
        }
        r.slack_bytes = r.delta.read_bytes > r.live_bytes ? r.delta.read_bytes - r.live_bytes : 0;
        return r;
    }

    std::uint64_t live_bytes(ClusterId cid) const override {
        auto it = members_.find(cid);
        if (it == members_.end()) throw std::out_of_range("layout: unplaced cluster");
        return it->second.size() * cfg_.record_bytes;
    }

    std::uint64_t total_live_bytes() const override {
        std::uint64_t total = 0;
        for (const auto& [cid, m] : members_) total += m.size() * cfg_.record_bytes;
        return total;
    }

    std::uint64_t allocated_bytes() const override { return region_bytes_; }

    IoStats drain_all() override { return {}; }

    void dump(std::ostream& os) const override {
        os << "sequence region base=" << base_ << " bytes=" << region_bytes_ << "\n";
        for (const auto& [cid, m] : members_) {
            os << "cluster " << cid << " entries=" << m.size()
               << " runs=" << runs_to_extents(m).size() << "\n";
        }
    }

private:
    std::uint64_t slot(EntryId id) const { return base_ + id * cfg_.record_bytes; }

    std::vector<Extent> runs_to_extents(const std::vector<EntryId>& sorted_ids) const {
        std::vector<Extent> out;
        std::size_t i = 0;
        while (i < sorted_ids.size()) {
            std::size_t j = i;
            while (j + 1 < sorted_ids.size() && sorted_ids[j + 1] == sorted_ids[j] + 1) ++j;
            out.push_back({slot(sorted_ids[i]),
                           (sorted_ids[j] - sorted_ids[i] + 1) * cfg_.record_bytes});
            i = j + 1;
        }
        return out;
    }

    void write_run(const std::vector<EntryId>& sorted_ids) {
        std::size_t i = 0;
        while (i < sorted_ids.size()) {
            std::size_t j = i;
            std::vector<std::uint8_t> blob;
            blob.reserve(cfg_.record_bytes);
            while (true) {
                const auto rec = record_of_(sorted_ids[j]);
                blob.insert(blob.end(), rec.begin(), rec.end());
                if (j + 1 < sorted_ids.size() && sorted_ids[j + 1] == sorted_ids[j] + 1) {
                    ++j;
                } else {
                    break;
                }
            }
            IoStats delta = dev_.write(slot(sorted_ids[i]), blob);
            account_write(WriteKind::Bulk, delta.written_bytes, delta.physical_written_bytes);
            i = j + 1;
        }
    }

    void charged_write_direct(std::uint64_t offset, std::span<const std::uint8_t> payload) {
        IoStats delta = dev_.write(offset, payload);
        account_write(WriteKind::Direct, delta.written_bytes, delta.physical_written_bytes);
    }

    FlashDevice& dev_;
    LayoutConfig cfg_;
    RecordFn record_of_;
    std::uint64_t base_ = 0;
    std::uint64_t region_bytes_ = 0;
    std::map<ClusterId, std::vector<EntryId>> members_;
};

}  // namespace dynakv

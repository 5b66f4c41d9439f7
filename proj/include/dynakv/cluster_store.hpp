#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <istream>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "rng.hpp"
#include "vector_stats.hpp"

namespace dynakv {

using EntryId = std::uint64_t;
using ClusterId = std::uint32_t;

enum class Origin : std::uint8_t { Prefill = 0, Decode = 1 };
enum class Residency : std::uint8_t { InMemory = 0, OnFlash = 1 };

// One cached key/value pair for a single (layer, head) stream. `id` is the
// 0-based token position and stays unique within the stream.
struct KvEntry {
    EntryId id = 0;
    Vector key;
    Vector value;
    Origin origin = Origin::Decode;
};

struct Cluster {
    ClusterId cid = 0;
    std::vector<EntryId> members;  // ascending entry id
    ClusterStats stats;
    std::vector<KvEntry> buffer;  // deferred arrivals, memory resident
    bool split_flag = false;
    Residency residency = Residency::InMemory;

    bool operator==(const Cluster& o) const {
        auto buf_eq = [](const std::vector<KvEntry>& a, const std::vector<KvEntry>& b) {
            if (a.size() != b.size()) return false;
            for (std::size_t i = 0; i < a.size(); ++i) {
                if (a[i].id != b[i].id || a[i].key != b[i].key || a[i].value != b[i].value ||
                    a[i].origin != b[i].origin) {
                    return false;
                }
            }
            return true;
        };
        return cid == o.cid && members == o.members && stats.n == o.stats.n &&
               stats.centroid == o.stats.centroid && stats.scatter == o.stats.scatter &&
               split_flag == o.split_flag && residency == o.residency && buf_eq(buffer, o.buffer);
    }
};

struct IngestOutcome {
    enum class Kind { Appended, SplitNow, Deferred };
    Kind kind = Kind::Appended;
    ClusterId cid = 0;      // cluster the entry was routed to (kept child on split)
    ClusterId new_cid = 0;  // valid for SplitNow
    std::vector<EntryId> absorbed;  // memory-resident entries that now need placement
};

struct SplitEvent {
    ClusterId parent = 0;   // kept child retains this id
    ClusterId new_cid = 0;
    std::vector<EntryId> absorbed;
};

struct ForcedSplit {
    ClusterId loaded = 0;  // cluster pulled from flash to execute the split
    SplitEvent split;
};

// ---------------------------------------------------------------------------
// 2-means used for cluster splitting: farthest-pair seeding, bounded Lloyd
// refinement, deterministic tie-breaks.

struct TwoMeansResult {
    std::vector<std::uint8_t> side;  // 0 = first child, 1 = second child
    ClusterStats first;
    ClusterStats second;
    std::size_t iterations = 0;
};

inline TwoMeansResult two_means(const std::vector<const Vector*>& pts,
                                std::size_t max_iters = 10) {
    const std::size_t n = pts.size();
    if (n < 2) throw std::invalid_argument("two_means: need at least 2 points");

    std::size_t seed_a = 0, seed_b = 1;
    double best = -1.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = sq_distance(*pts[i], *pts[j]);
            if (d > best) {
                best = d;
                seed_a = i;
                seed_b = j;
            }
        }
    }

    TwoMeansResult r;
    r.side.assign(n, 0);
    Vector c0 = *pts[seed_a];
    Vector c1 = *pts[seed_b];
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        std::vector<std::uint8_t> next(n, 0);
        for (std::size_t i = 0; i < n; ++i) {
            next[i] = sq_distance(*pts[i], c0) <= sq_distance(*pts[i], c1) ? 0 : 1;
        }
        // Keep both children nonempty: pull over the point nearest the
        // starved center.
        for (int empty_side : {0, 1}) {
            if (std::find(next.begin(), next.end(),
                          static_cast<std::uint8_t>(empty_side)) != next.end()) {
                continue;
            }
            const Vector& target = empty_side == 0 ? c0 : c1;
            std::size_t pick = 0;
            double pick_d = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < n; ++i) {
                const double d = sq_distance(*pts[i], target);
                if (d < pick_d) {
                    pick_d = d;
                    pick = i;
                }
            }
            next[pick] = static_cast<std::uint8_t>(empty_side);
        }
        const bool converged = iter > 0 && next == r.side;
        r.side = std::move(next);
        r.iterations = iter + 1;

        std::vector<const Vector*> g0, g1;
        for (std::size_t i = 0; i < n; ++i) (r.side[i] == 0 ? g0 : g1).push_back(pts[i]);
        r.first = batch_stats(g0);
        r.second = batch_stats(g1);
        if (converged) break;
        c0 = r.first.centroid;
        c1 = r.second.centroid;
    }
    return r;
}

// Splits a cluster over its members plus `extra` memory-resident entries.
// The child whose centroid stays nearest the parent's last centroid keeps the
// original id; the other child takes `fresh_cid`. Buffer and flag state do
// not carry over.
template <class KeyLookup>
std::pair<Cluster, Cluster> split_cluster(const Cluster& c, const std::vector<KvEntry>& extra,
                                          KeyLookup&& key_of, ClusterId fresh_cid) {
    std::vector<const Vector*> pts;
    std::vector<EntryId> ids;
    pts.reserve(c.members.size() + extra.size());
    ids.reserve(pts.capacity());
    for (EntryId id : c.members) {
        pts.push_back(&key_of(id));
        ids.push_back(id);
    }
    for (const KvEntry& e : extra) {
        pts.push_back(&e.key);
        ids.push_back(e.id);
    }
    if (pts.size() < 2) throw std::invalid_argument("split_cluster: need at least 2 points");

    const TwoMeansResult tm = two_means(pts);

    Cluster first, second;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        (tm.side[i] == 0 ? first : second).members.push_back(ids[i]);
    }
    std::sort(first.members.begin(), first.members.end());
    std::sort(second.members.begin(), second.members.end());
    first.stats = tm.first;
    second.stats = tm.second;

    const double d_first = sq_distance(tm.first.centroid, c.stats.centroid);
    const double d_second = sq_distance(tm.second.centroid, c.stats.centroid);
    Cluster& kept = d_first <= d_second ? first : second;
    Cluster& born = d_first <= d_second ? second : first;
    kept.cid = c.cid;
    born.cid = fresh_cid;
    kept.residency = Residency::InMemory;
    born.residency = Residency::InMemory;
    return {std::move(kept), std::move(born)};
}

// ---------------------------------------------------------------------------
// Seeded k-means over key vectors (k-means++ start, Lloyd refinement with
// empty-cluster repair). Used for the initial partition and for the
// local-update baseline.

inline std::vector<std::size_t> kmeans_assign(const std::vector<const Vector*>& pts,
                                              std::size_t k, std::uint64_t seed,
                                              std::size_t max_iters = 50) {
    const std::size_t n = pts.size();
    if (k == 0 || k > n) throw std::invalid_argument("kmeans: need 1 <= k <= n");
    Rng rng(seed);

    std::vector<Vector> centers;
    centers.reserve(k);
    std::vector<std::uint8_t> chosen(n, 0);
    {
        const std::size_t first = static_cast<std::size_t>(rng.below(n));
        centers.push_back(*pts[first]);
        chosen[first] = 1;
    }
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    while (centers.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], sq_distance(*pts[i], centers.back()));
            total += d2[i];
        }
        std::size_t pick = n;
        if (total > 0.0) {
            const double target = rng.uniform() * total;
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= target) {
                    pick = i;
                    break;
                }
            }
        }
        if (pick == n || chosen[pick]) {
            // Degenerate mass (duplicates): take the first unchosen point.
            pick = n;
            for (std::size_t i = 0; i < n; ++i) {
                if (!chosen[i]) {
                    pick = i;
                    break;
                }
            }
        }
        centers.push_back(*pts[pick]);
        chosen[pick] = 1;
    }

    std::vector<std::size_t> assign(n, 0);
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        bool changed = iter == 0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best_c = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double d = sq_distance(*pts[i], centers[c]);
                if (d < best_d) {
                    best_d = d;
                    best_c = c;
                }
            }
            if (assign[i] != best_c) {
                assign[i] = best_c;
                changed = true;
            }
        }
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) counts[assign[i]]++;
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) continue;
            // Repair: steal the point farthest from its current center,
            // among clusters that can spare one.
            std::size_t steal = n;
            double steal_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (counts[assign[i]] <= 1) continue;
                const double d = sq_distance(*pts[i], centers[assign[i]]);
                if (d > steal_d) {
                    steal_d = d;
                    steal = i;
                }
            }
            if (steal == n) throw std::logic_error("kmeans: cannot repair empty cluster");
            counts[assign[steal]]--;
            assign[steal] = c;
            counts[c] = 1;
            changed = true;
        }
        for (std::size_t c = 0; c < k; ++c) {
            std::fill(centers[c].begin(), centers[c].end(), 0.0);
        }
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t d = 0; d < pts[i]->size(); ++d) centers[assign[i]][d] += (*pts[i])[d];
        }
        for (std::size_t c = 0; c < k; ++c) {
            const double inv = 1.0 / static_cast<double>(counts[c]);
            for (double& v : centers[c]) v *= inv;
        }
        if (!changed) break;
    }
    return assign;
}

// ---------------------------------------------------------------------------
// Per-(layer, head) adaptive partition: nearest-cluster routing, variance
// gated appends, immediate splits for memory-resident clusters, deferred
// splits (bounded buffer) for flash-resident ones.

class Partition {
public:
    Partition() = default;

    static Partition init(const std::vector<KvEntry>& entries, std::size_t target_clusters,
                          std::uint64_t seed, int head_id = 0, int layer_id = 0) {
        if (entries.empty() || target_clusters == 0 || target_clusters > entries.size()) {
            throw std::invalid_argument("init_partition: need 1 <= M0 <= |entries|");
        }
        Partition p;
        p.head_id_ = head_id;
        p.layer_id_ = layer_id;
        p.dim_ = entries.front().key.size();
        std::vector<const Vector*> keys;
        keys.reserve(entries.size());
        for (const auto& e : entries) keys.push_back(&e.key);
        const auto assign = kmeans_assign(keys, target_clusters, seed);

        std::vector<std::vector<const Vector*>> grouped(target_clusters);
        std::vector<std::vector<EntryId>> ids(target_clusters);
        for (std::size_t i = 0; i < entries.size(); ++i) {
            grouped[assign[i]].push_back(keys[i]);
            ids[assign[i]].push_back(entries[i].id);
        }
        for (std::size_t c = 0; c < target_clusters; ++c) {
            Cluster cl;
            cl.cid = static_cast<ClusterId>(c);
            cl.members = std::move(ids[c]);
            std::sort(cl.members.begin(), cl.members.end());
            cl.stats = batch_stats(grouped[c]);
            cl.residency = Residency::InMemory;
            p.clusters_.emplace(cl.cid, std::move(cl));
        }
        p.next_cid_ = static_cast<ClusterId>(target_clusters);
        for (const auto& e : entries) p.mark_ingested(e.id);
        return p;
    }

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return clusters_.size(); }
    int head_id() const { return head_id_; }
    int layer_id() const { return layer_id_; }
    double threshold() const { return tau_; }
    void set_threshold(double tau) { tau_ = tau; }
    std::size_t buffer_budget() const { return bmax_; }
    void set_buffer_budget(std::size_t b) { bmax_ = b; }
    std::size_t buffered_total() const { return buffered_total_; }
    std::uint64_t ingested_count() const { return ingested_count_; }

    const std::map<ClusterId, Cluster>& clusters() const { return clusters_; }
    const Cluster& cluster(ClusterId cid) const {
        auto it = clusters_.find(cid);
        if (it == clusters_.end()) throw std::out_of_range("unknown cluster id");
        return it->second;
    }
    bool contains(ClusterId cid) const { return clusters_.count(cid) != 0; }
    const Vector& representative(ClusterId cid) const { return cluster(cid).stats.centroid; }

    void set_residency(ClusterId cid, Residency r) { mutable_cluster(cid).residency = r; }

    // Registers an externally clustered group (local-update windows). The
    // ids must be new to this partition.
    ClusterId add_cluster(std::vector<EntryId> members, ClusterStats stats) {
        if (members.empty() || stats.n != members.size()) {
            throw std::invalid_argument("add_cluster: members/stats mismatch");
        }
        for (EntryId id : members) {
            if (is_ingested(id)) throw std::invalid_argument("add_cluster: duplicate entry id");
        }
        if (dim_ == 0) dim_ = stats.centroid.size();
        Cluster cl;
        cl.cid = next_cid_++;
        cl.members = std::move(members);
        std::sort(cl.members.begin(), cl.members.end());
        cl.stats = std::move(stats);
        cl.residency = Residency::InMemory;
        for (EntryId id : cl.members) mark_ingested(id);
        const ClusterId cid = cl.cid;
        clusters_.emplace(cid, std::move(cl));
        return cid;
    }

    ClusterId assign_entry(const Vector& key) const {
        if (clusters_.empty()) throw std::invalid_argument("assign_entry: empty partition");
        ClusterId best = clusters_.begin()->first;
        double best_d = std::numeric_limits<double>::infinity();
        for (const auto& [cid, cl] : clusters_) {
            const double d = sq_distance(key, cl.stats.centroid);
            if (d < best_d) {
                best_d = d;
                best = cid;
            }
        }
        return best;
    }
    ClusterId assign_entry(const KvEntry& e) const { return assign_entry(e.key); }

    template <class KeyLookup>
    IngestOutcome ingest(const KvEntry& e, std::span<const ClusterId> active,
                         KeyLookup&& key_of) {
        if (is_ingested(e.id)) throw std::invalid_argument("ingest: duplicate entry id");
        const ClusterId j = assign_entry(e.key);
        Cluster& cl = mutable_cluster(j);
        const ClusterStats trial = update_stats(cl.stats, e.key);

        IngestOutcome out;
        if (trial.variance() <= tau_) {
            auto pos = std::lower_bound(cl.members.begin(), cl.members.end(), e.id);
            cl.members.insert(pos, e.id);
            cl.stats = trial;
            mark_ingested(e.id);
            out.kind = IngestOutcome::Kind::Appended;
            out.cid = j;
            return out;
        }
        if (std::find(active.begin(), active.end(), j) != active.end()) {
            std::vector<KvEntry> extra = std::move(cl.buffer);
            cl.buffer.clear();
            buffered_total_ -= extra.size();
            extra.push_back(e);
            mark_ingested(e.id);
            const SplitEvent ev = do_split(j, extra, key_of);
            out.kind = IngestOutcome::Kind::SplitNow;
            out.cid = ev.parent;
            out.new_cid = ev.new_cid;
            out.absorbed = ev.absorbed;
            return out;
        }
        cl.buffer.push_back(e);
        cl.split_flag = true;
        buffered_total_ += 1;
        mark_ingested(e.id);
        out.kind = IngestOutcome::Kind::Deferred;
        out.cid = j;
        return out;
    }

    // Executes pending splits for flagged clusters that are now memory
    // resident; ascending cluster id order.
    template <class KeyLookup>
    std::vector<SplitEvent> flush_deferred(std::span<const ClusterId> active,
                                           KeyLookup&& key_of) {
        std::vector<ClusterId> due;
        for (const auto& [cid, cl] : clusters_) {
            if (cl.split_flag &&
                std::find(active.begin(), active.end(), cid) != active.end()) {
                due.push_back(cid);
            }
        }
        std::vector<SplitEvent> events;
        events.reserve(due.size());
        for (ClusterId cid : due) {
            Cluster& cl = mutable_cluster(cid);
            std::vector<KvEntry> extra = std::move(cl.buffer);
            cl.buffer.clear();
            buffered_total_ -= extra.size();
            events.push_back(do_split(cid, extra, key_of));
        }
        return events;
    }

    // When total buffered entries reach the budget, force-load the cluster
    // with the largest buffer (lowest id on ties) and split it.
    template <class KeyLookup, class OnLoad>
    std::optional<ForcedSplit> enforce_buffer_budget(KeyLookup&& key_of, OnLoad&& on_load) {
        if (buffered_total_ < bmax_ || buffered_total_ == 0) return std::nullopt;
        ClusterId pick = 0;
        std::size_t pick_size = 0;
        for (const auto& [cid, cl] : clusters_) {
            if (cl.buffer.size() > pick_size) {
                pick_size = cl.buffer.size();
                pick = cid;
            }
        }
        on_load(pick);
        Cluster& cl = mutable_cluster(pick);
        std::vector<KvEntry> extra = std::move(cl.buffer);
        cl.buffer.clear();
        buffered_total_ -= extra.size();
        ForcedSplit forced;
        forced.loaded = pick;
        forced.split = do_split(pick, extra, key_of);
        return forced;
    }

    template <class KeyLookup>
    std::optional<ForcedSplit> enforce_buffer_budget(KeyLookup&& key_of) {
        return enforce_buffer_budget(key_of, [](ClusterId) {});
    }

    bool is_ingested(EntryId id) const {
        return id < ingested_.size() && ingested_[id];
    }

    // Conservation audit: every ingested id sits in exactly one member list
    // or buffer, and nothing else does.
    bool audit_conservation() const {
        std::vector<std::uint8_t> seen(ingested_.size(), 0);
        std::uint64_t total = 0;
        auto visit = [&](EntryId id) {
            if (id >= seen.size() || !ingested_[id] || seen[id]) return false;
            seen[id] = 1;
            ++total;
            return true;
        };
        for (const auto& [cid, cl] : clusters_) {
            for (EntryId id : cl.members) {
                if (!visit(id)) return false;
            }
            for (const KvEntry& e : cl.buffer) {
                if (!visit(e.id)) return false;
            }
            if (cl.stats.n != cl.members.size()) return false;
        }
        return total == ingested_count_;
    }

    bool operator==(const Partition& p) const {
        return dim_ == p.dim_ && head_id_ == p.head_id_ && layer_id_ == p.layer_id_ &&
               tau_ == p.tau_ && bmax_ == p.bmax_ && next_cid_ == p.next_cid_ &&
               clusters_ == p.clusters_;
    }

    void save(std::ostream& os) const;
    static Partition load(std::istream& is);
    std::vector<std::uint8_t> to_bytes() const;
    static Partition from_bytes(std::span<const std::uint8_t> bytes);

private:
    Cluster& mutable_cluster(ClusterId cid) {
        auto it = clusters_.find(cid);
        if (it == clusters_.end()) throw std::out_of_range("unknown cluster id");
        return it->second;
    }

    void mark_ingested(EntryId id) {
        if (id >= ingested_.size()) ingested_.resize(id + 1, false);
        if (!ingested_[id]) {
            ingested_[id] = true;
            ++ingested_count_;
        }
    }

    // Caller has already detached the buffer into `extra` and adjusted
    // buffered_total_.
    template <class KeyLookup>
    SplitEvent do_split(ClusterId cid, const std::vector<KvEntry>& extra, KeyLookup&& key_of) {
        Cluster& cl = mutable_cluster(cid);
        cl.split_flag = false;
        const ClusterId fresh = next_cid_++;
        auto [kept, born] = split_cluster(cl, extra, key_of, fresh);
        SplitEvent ev;
        ev.parent = kept.cid;
        ev.new_cid = born.cid;
        ev.absorbed.reserve(extra.size());
        for (const KvEntry& e : extra) ev.absorbed.push_back(e.id);
        clusters_[cid] = std::move(kept);
        clusters_.emplace(fresh, std::move(born));
        return ev;
    }

    std::map<ClusterId, Cluster> clusters_;
    std::size_t dim_ = 0;
    int head_id_ = 0;
    int layer_id_ = 0;
    double tau_ = std::numeric_limits<double>::infinity();
    std::size_t bmax_ = 16;
    ClusterId next_cid_ = 0;
    std::size_t buffered_total_ = 0;
    std::vector<bool> ingested_;
    std::uint64_t ingested_count_ = 0;
};

// Nearest-rank percentile: sorted ascending, index ceil(p/100 * n) (1-based).
inline double percentile_nearest_rank(std::vector<double> values, double pct) {
    if (values.empty()) throw std::invalid_argument("percentile of empty set");
    std::sort(values.begin(), values.end());
    const double rank = std::ceil(pct / 100.0 * static_cast<double>(values.size()));
    std::size_t idx = rank <= 1.0 ? 0 : static_cast<std::size_t>(rank) - 1;
    if (idx >= values.size()) idx = values.size() - 1;
    return values[idx];
}

// Head-specific split threshold: alpha times the 90th percentile of the
// initial per-cluster variances.
inline double calibrate_threshold(const Partition& initial, double alpha = 1.5) {
    std::vector<double> vars;
    vars.reserve(initial.size());
    for (const auto& [cid, cl] : initial.clusters()) vars.push_back(cl.stats.variance());
    return alpha * percentile_nearest_rank(std::move(vars), 90.0);
}

inline std::map<int, double> calibrate_thresholds(const std::vector<Partition>& per_head,
                                                  double alpha = 1.5) {
    std::map<int, double> out;
    for (const auto& p : per_head) out[p.head_id()] = calibrate_threshold(p, alpha);
    return out;
}

// ---------------------------------------------------------------------------
// Snapshot serialization: versioned little-endian blob.

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_f64(std::vector<std::uint8_t>& b, double v) {
    put_u64(b, std::bit_cast<std::uint64_t>(v));
}

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(take()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(take()) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::uint8_t u8() { return take(); }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::uint8_t take() {
        if (pos_ >= bytes_.size()) throw std::runtime_error("snapshot truncated");
        return bytes_[pos_++];
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::uint32_t kPartitionMagic = 0x50564B44u;  // "DKVP"
inline constexpr std::uint32_t kPartitionVersion = 1;

inline std::vector<std::uint8_t> Partition::to_bytes() const {
    using namespace detail;
    std::vector<std::uint8_t> b;
    put_u32(b, kPartitionMagic);
    put_u32(b, kPartitionVersion);
    put_u32(b, static_cast<std::uint32_t>(dim_));
    put_u32(b, static_cast<std::uint32_t>(head_id_));
    put_u32(b, static_cast<std::uint32_t>(layer_id_));
    put_f64(b, tau_);
    put_u64(b, bmax_);
    put_u32(b, next_cid_);
    put_u32(b, static_cast<std::uint32_t>(clusters_.size()));
    auto put_vec = [&](const Vector& v) {
        for (double x : v) put_f64(b, x);
    };
    for (const auto& [cid, cl] : clusters_) {
        put_u32(b, cid);
        b.push_back(static_cast<std::uint8_t>(cl.residency));
        b.push_back(cl.split_flag ? 1 : 0);
        put_u64(b, cl.stats.n);
        put_f64(b, cl.stats.scatter);
        put_vec(cl.stats.centroid);
        put_u64(b, cl.members.size());
        for (EntryId id : cl.members) put_u64(b, id);
        put_u64(b, cl.buffer.size());
        for (const KvEntry& e : cl.buffer) {
            put_u64(b, e.id);
            b.push_back(static_cast<std::uint8_t>(e.origin));
            put_vec(e.key);
            put_vec(e.value);
        }
    }
    return b;
}

inline Partition Partition::from_bytes(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    if (r.u32() != kPartitionMagic) throw std::runtime_error("bad snapshot magic");
    if (r.u32() != kPartitionVersion) throw std::runtime_error("unsupported snapshot version");
    Partition p;
    p.dim_ = r.u32();
    p.head_id_ = static_cast<int>(r.u32());
    p.layer_id_ = static_cast<int>(r.u32());
    p.tau_ = r.f64();
    p.bmax_ = r.u64();
    p.next_cid_ = r.u32();
    const std::uint32_t count = r.u32();
    auto get_vec = [&](std::size_t dim) {
        Vector v(dim);
        for (double& x : v) x = r.f64();
        return v;
    };
    for (std::uint32_t i = 0; i < count; ++i) {
        Cluster cl;
        cl.cid = r.u32();
        cl.residency = static_cast<Residency>(r.u8());
        cl.split_flag = r.u8() != 0;
        cl.stats.n = r.u64();
        cl.stats.scatter = r.f64();
        cl.stats.centroid = get_vec(p.dim_);
        const std::uint64_t nm = r.u64();
        cl.members.reserve(nm);
        for (std::uint64_t m = 0; m < nm; ++m) cl.members.push_back(r.u64());
        const std::uint64_t nb = r.u64();
        for (std::uint64_t m = 0; m < nb; ++m) {
            KvEntry e;
            e.id = r.u64();
            e.origin = static_cast<Origin>(r.u8());
            e.key = get_vec(p.dim_);
            e.value = get_vec(p.dim_);
            cl.buffer.push_back(std::move(e));
        }
        p.buffered_total_ += cl.buffer.size();
        for (EntryId id : cl.members) p.mark_ingested(id);
        for (const KvEntry& e : cl.buffer) p.mark_ingested(e.id);
        p.clusters_.emplace(cl.cid, std::move(cl));
    }
    if (!r.done()) throw std::runtime_error("snapshot has trailing bytes");
    return p;
}

inline void Partition::save(std::ostream& os) const {
    const auto b = to_bytes();
    os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

inline Partition Partition::load(std::istream& is) {
    std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(is)),
                                std::istreambuf_iterator<char>());
    return from_bytes(b);
}

}  // namespace dynakv

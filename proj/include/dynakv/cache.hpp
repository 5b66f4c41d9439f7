#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "cluster_store.hpp"
#include "flash_device.hpp"

namespace dynakv {

enum class CachePolicy : std::uint8_t { Lru = 0, ClusterAligned = 1 };

struct CacheConfig {
    std::uint64_t capacity_bytes = 0;
    double reserved_fraction = 0.2;           // budget for recently updated clusters
    std::uint64_t update_retention_horizon = 16;  // decode steps
    CachePolicy policy = CachePolicy::ClusterAligned;

    void validate() const {
        if (reserved_fraction < 0.0 || reserved_fraction >= 1.0) {
            throw std::invalid_argument("cache config: reserved_fraction in [0, 1)");
        }
        if (update_retention_horizon < 1) {
            throw std::invalid_argument("cache config: horizon >= 1");
        }
    }
};

struct CacheEntryMeta {
    ClusterId cid = 0;
    std::uint64_t size_bytes = 0;
    std::int64_t last_access_step = -1;
    std::int64_t last_update_step = -1;  // append or split
    bool resident = false;
};

struct LookupResult {
    std::vector<ClusterId> hits;
    std::vector<ClusterId> misses;
};

struct CacheStats {
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
    std::uint64_t evictions = 0;
    std::uint64_t passthrough = 0;  // clusters too large to cache
};

// Bounded cluster cache. The cluster-aligned policy scores eviction victims
// by recency rank times a size factor (small clusters are cheap to keep and
// large ones already read sequentially from flash), and recently updated
// clusters are held in a reserved slice of the capacity while the horizon
// lasts. LRU mode ignores sizes and the reservation.
class ClusterCache {
public:
    explicit ClusterCache(CacheConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const CacheConfig& config() const { return cfg_; }
    const CacheStats& stats() const { return stats_; }
    std::uint64_t resident_bytes() const { return resident_bytes_; }

    // Representatives charged as an always-resident pseudo-cluster.
    void set_pinned_bytes(std::uint64_t bytes) { pinned_bytes_ = bytes; }
    std::uint64_t pinned_bytes() const { return pinned_bytes_; }

    std::uint64_t effective_capacity() const {
        return cfg_.capacity_bytes > pinned_bytes_ ? cfg_.capacity_bytes - pinned_bytes_ : 0;
    }

    bool resident(ClusterId cid) const {
        auto it = meta_.find(cid);
        return it != meta_.end() && it->second.resident;
    }

    LookupResult lookup(std::span<const ClusterId> active, std::int64_t step) {
        LookupResult r;
        for (ClusterId cid : active) {
            if (resident(cid)) {
                meta_[cid].last_access_step = step;
                r.hits.push_back(cid);
                ++stats_.hits;
            } else {
                r.misses.push_back(cid);
                ++stats_.misses;
            }
        }
        return r;
    }

    void mark_updated(ClusterId cid, std::int64_t step) {
        CacheEntryMeta& m = meta_[cid];
        m.cid = cid;
        m.last_update_step = step;
    }

    void update_size(ClusterId cid, std::uint64_t size_bytes, std::int64_t step) {
        CacheEntryMeta& m = touch(cid);
        set_size(m, size_bytes);
        evict_to_fit(step, nullptr);
    }

    // Split children stay memory resident and inherit the split step; the
    // parent's identity carries over to the kept child.
    void on_split(ClusterId kept, std::uint64_t kept_size, ClusterId fresh,
                  std::uint64_t fresh_size, std::int64_t step) {
        for (auto [cid, size] : {std::pair{kept, kept_size}, std::pair{fresh, fresh_size}}) {
            CacheEntryMeta& m = touch(cid);
            set_size(m, size);
            m.last_update_step = step;
            m.last_access_step = step;
            admit(m);
        }
        evict_to_fit(step, nullptr);
    }

    // Admits the fetched clusters and evicts until the capacity holds.
    // Returns the evicted cluster ids.
    std::vector<ClusterId> admit_and_evict(
        std::span<const std::pair<ClusterId, std::uint64_t>> fetched, std::int64_t step) {
        for (const auto& [cid, size] : fetched) {
            CacheEntryMeta& m = touch(cid);
            set_size(m, size);
            m.last_access_step = step;
            admit(m);
        }
        std::vector<ClusterId> evicted;
        evict_to_fit(step, &evicted);
        return evicted;
    }

    void drop(ClusterId cid) {
        auto it = meta_.find(cid);
        if (it == meta_.end()) return;
        if (it->second.resident) resident_bytes_ -= it->second.size_bytes;
        meta_.erase(it);
    }

    std::vector<ClusterId> resident_ids() const {
        std::vector<ClusterId> out;
        for (const auto& [cid, m] : meta_) {
            if (m.resident) out.push_back(cid);
        }
        return out;
    }

private:
    // resident_bytes_ always equals the sum of resident meta sizes.
    CacheEntryMeta& touch(ClusterId cid) {
        CacheEntryMeta& m = meta_[cid];
        m.cid = cid;
        return m;
    }

    void set_size(CacheEntryMeta& m, std::uint64_t size_bytes) {
        if (m.resident) {
            resident_bytes_ -= m.size_bytes;
            resident_bytes_ += size_bytes;
        }
        m.size_bytes = size_bytes;
    }

    void make_nonresident(CacheEntryMeta& m) {
        if (m.resident) {
            m.resident = false;
            resident_bytes_ -= m.size_bytes;
        }
    }

    void admit(CacheEntryMeta& m) {
        if (m.size_bytes > effective_capacity()) {
            make_nonresident(m);
            ++stats_.passthrough;
            return;
        }
        if (!m.resident) {
            m.resident = true;
            resident_bytes_ += m.size_bytes;
        }
    }

    void evict_to_fit(std::int64_t step, std::vector<ClusterId>* evicted) {
        if (resident_bytes_ <= effective_capacity()) return;

        struct Victim {
            double score;
            std::size_t rank;
            ClusterId cid;
            bool exempt;
        };
        std::vector<const CacheEntryMeta*> residents;
        for (const auto& [cid, m] : meta_) {
            if (m.resident) residents.push_back(&m);
        }
        // Recency rank: 1 = most recent (lowest cid on ties).
        std::sort(residents.begin(), residents.end(),
                  [](const CacheEntryMeta* a, const CacheEntryMeta* b) {
                      if (a->last_access_step != b->last_access_step) {
                          return a->last_access_step > b->last_access_step;
                      }
                      return a->cid < b->cid;
                  });
        double mean_bytes = 0.0;
        for (const auto* m : residents) mean_bytes += static_cast<double>(m->size_bytes);
        mean_bytes = residents.empty() ? 1.0 : mean_bytes / static_cast<double>(residents.size());
        if (mean_bytes <= 0.0) mean_bytes = 1.0;

        // Updated clusters hold their exemption while they fit in the
        // reserved budget, most recently updated first.
        std::vector<std::uint8_t> exempt(residents.size(), 0);
        if (cfg_.policy == CachePolicy::ClusterAligned) {
            std::vector<std::size_t> updated;
            for (std::size_t i = 0; i < residents.size(); ++i) {
                const auto* m = residents[i];
                if (m->last_update_step >= 0 &&
                    step - m->last_update_step <=
                        static_cast<std::int64_t>(cfg_.update_retention_horizon)) {
                    updated.push_back(i);
                }
            }
            std::sort(updated.begin(), updated.end(), [&](std::size_t a, std::size_t b) {
                if (residents[a]->last_update_step != residents[b]->last_update_step) {
                    return residents[a]->last_update_step > residents[b]->last_update_step;
                }
                return residents[a]->cid < residents[b]->cid;
            });
            const double budget =
                cfg_.reserved_fraction * static_cast<double>(effective_capacity());
            double used = 0.0;
            for (std::size_t i : updated) {
                const double s = static_cast<double>(residents[i]->size_bytes);
                if (used + s <= budget) {
                    exempt[i] = 1;
                    used += s;
                }
            }
        }

        std::vector<Victim> victims;
        victims.reserve(residents.size());
        for (std::size_t i = 0; i < residents.size(); ++i) {
            const auto* m = residents[i];
            const std::size_t rank = i + 1;
            double score = static_cast<double>(rank);
            if (cfg_.policy == CachePolicy::ClusterAligned) {
                score *= 1.0 + static_cast<double>(m->size_bytes) / mean_bytes;
            }
            victims.push_back({score, rank, m->cid, exempt[i] != 0});
        }
        // Highest score first; exempt clusters only as a last resort.
        std::sort(victims.begin(), victims.end(), [](const Victim& a, const Victim& b) {
            if (a.exempt != b.exempt) return !a.exempt;
            if (a.score != b.score) return a.score > b.score;
            if (a.rank != b.rank) return a.rank > b.rank;
            return a.cid < b.cid;
        });
        for (const Victim& v : victims) {
            if (resident_bytes_ <= effective_capacity()) break;
            make_nonresident(meta_[v.cid]);
            ++stats_.evictions;
            if (evicted) evicted->push_back(v.cid);
        }
    }

    CacheConfig cfg_;
    std::map<ClusterId, CacheEntryMeta> meta_;
    std::uint64_t resident_bytes_ = 0;
    std::uint64_t pinned_bytes_ = 0;
    CacheStats stats_;
};

// ---------------------------------------------------------------------------
// Analytic two-stage pipeline model over simulated time.

struct StageTiming {
    std::vector<double> compute_s;   // per layer
    std::vector<double> transfer_s;  // per layer
};

enum class PipelineMode : std::uint8_t { Serial = 0, Overlapped = 1 };

// Serial: sum of all stages. Overlapped: the next layer's transfer hides
// behind the current layer's compute; the first transfer and the last
// compute stay exposed.
inline double pipeline_latency(const StageTiming& t, PipelineMode mode) {
    const std::size_t layers = t.compute_s.size();
    if (layers == 0 || t.transfer_s.size() != layers) {
        throw std::invalid_argument("pipeline_latency: need >= 1 layer, equal sizes");
    }
    for (std::size_t l = 0; l < layers; ++l) {
        if (t.compute_s[l] < 0.0 || t.transfer_s[l] < 0.0) {
            throw std::invalid_argument("pipeline_latency: negative stage time");
        }
    }
    if (mode == PipelineMode::Serial) {
        double total = 0.0;
        for (std::size_t l = 0; l < layers; ++l) total += t.compute_s[l] + t.transfer_s[l];
        return total;
    }
    double total = t.transfer_s[0];
    for (std::size_t l = 0; l + 1 < layers; ++l) {
        total += std::max(t.compute_s[l], t.transfer_s[l + 1]);
    }
    total += t.compute_s[layers - 1];
    return total;
}

// Un-hidden part of streaming the representative table while the query
// projection runs.
inline double representative_prefetch_cost(std::uint64_t rep_bytes, double qkv_compute_s,
                                           const DeviceConfig& cfg) {
    if (rep_bytes == 0) return 0.0;
    const double transfer =
        cfg.cmd_overhead_s + static_cast<double>(rep_bytes) / cfg.stream_bw;
    return std::max(0.0, transfer - qkv_compute_s);
}

// Peak resident bytes when layer caches are virtualized: only the executing
// layer plus the prefetched next layer stay in memory.
inline std::uint64_t virtualized_peak_bytes(std::span<const std::uint64_t> layer_bytes) {
    if (layer_bytes.empty()) return 0;
    if (layer_bytes.size() == 1) return layer_bytes[0];
    std::uint64_t peak = 0;
    for (std::size_t l = 0; l < layer_bytes.size(); ++l) {
        const std::uint64_t next = layer_bytes[(l + 1) % layer_bytes.size()];
        peak = std::max(peak, layer_bytes[l] + next);
    }
    return peak;
}

inline std::uint64_t total_peak_bytes(std::span<const std::uint64_t> layer_bytes) {
    std::uint64_t total = 0;
    for (std::uint64_t b : layer_bytes) total += b;
    return total;
}

}  // namespace dynakv

#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "cluster_store.hpp"
#include "vector_stats.hpp"

namespace dynakv {

enum class Similarity : std::uint8_t { Dot = 0, Cosine = 1 };

inline double similarity_score(const Vector& q, const Vector& r, Similarity sim) {
    if (sim == Similarity::Dot) return dot(q, r);
    const double nq = norm(q);
    const double nr = norm(r);
    if (nq == 0.0 || nr == 0.0) return 0.0;
    return dot(q, r) / (nq * nr);
}

// Clusters chosen for one query, highest score first (lowest id on ties).
struct ActiveSet {
    std::vector<ClusterId> cids;
    std::vector<double> scores;

    std::size_t size() const { return cids.size(); }
    bool contains(ClusterId cid) const {
        return std::find(cids.begin(), cids.end(), cid) != cids.end();
    }
};

// Exact top-m entries for a query under the same similarity, by brute force.
struct OracleSet {
    std::vector<EntryId> entry_ids;  // ascending

    bool contains(EntryId id) const {
        return std::binary_search(entry_ids.begin(), entry_ids.end(), id);
    }
};

inline std::vector<std::pair<double, ClusterId>> rank_clusters(const Vector& q,
                                                               const Partition& p,
                                                               Similarity sim) {
    if (p.size() == 0) throw std::invalid_argument("rank_clusters: empty partition");
    std::vector<std::pair<double, ClusterId>> ranked;
    ranked.reserve(p.size());
    for (const auto& [cid, cl] : p.clusters()) {
        ranked.emplace_back(similarity_score(q, cl.stats.centroid, sim), cid);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    return ranked;
}

inline ActiveSet select_topk(const Vector& q, const Partition& p, std::size_t k,
                             Similarity sim = Similarity::Dot) {
    if (k == 0) throw std::invalid_argument("select_topk: k must be >= 1");
    auto ranked = rank_clusters(q, p, sim);
    ActiveSet a;
    const std::size_t take = std::min(k, ranked.size());
    a.cids.reserve(take);
    a.scores.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        a.scores.push_back(ranked[i].first);
        a.cids.push_back(ranked[i].second);
    }
    return a;
}

// Budgeted variant: keep adding the best-scoring clusters until the selected
// member count reaches `budget_entries`. Used for equal-fetch comparisons
// across strategies.
inline ActiveSet select_budget(const Vector& q, const Partition& p,
                               std::size_t budget_entries,
                               Similarity sim = Similarity::Dot) {
    if (budget_entries == 0) throw std::invalid_argument("select_budget: zero budget");
    auto ranked = rank_clusters(q, p, sim);
    ActiveSet a;
    std::size_t covered = 0;
    for (const auto& [score, cid] : ranked) {
        if (covered >= budget_entries && !a.cids.empty()) break;
        a.scores.push_back(score);
        a.cids.push_back(cid);
        covered += p.cluster(cid).members.size();
    }
    return a;
}

inline std::vector<std::pair<double, EntryId>> score_entries(const Vector& q,
                                                             std::span<const KvEntry> entries,
                                                             Similarity sim = Similarity::Dot) {
    std::vector<std::pair<double, EntryId>> scored;
    scored.reserve(entries.size());
    for (const KvEntry& e : entries) {
        scored.emplace_back(similarity_score(q, e.key, sim), e.id);
    }
    return scored;
}

inline OracleSet top_m_of_scored(std::vector<std::pair<double, EntryId>> scored,
                                 std::size_t m) {
    if (m > scored.size()) throw std::invalid_argument("exact_oracle: m exceeds population");
    auto better = [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    };
    if (m < scored.size()) {
        std::nth_element(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(m),
                         scored.end(), better);
    }
    OracleSet o;
    o.entry_ids.reserve(m);
    for (std::size_t i = 0; i < m; ++i) o.entry_ids.push_back(scored[i].second);
    std::sort(o.entry_ids.begin(), o.entry_ids.end());
    return o;
}

inline OracleSet exact_oracle(const Vector& q, std::span<const KvEntry> all_entries,
                              std::size_t m, Similarity sim = Similarity::Dot) {
    return top_m_of_scored(score_entries(q, all_entries, sim), m);
}

// Entries covered by the active clusters: flash-resident members plus their
// deferred (memory-resident) buffers.
inline std::unordered_set<EntryId> covered_entries(const ActiveSet& a, const Partition& p) {
    std::unordered_set<EntryId> covered;
    for (ClusterId cid : a.cids) {
        const Cluster& cl = p.cluster(cid);
        covered.insert(cl.members.begin(), cl.members.end());
        for (const KvEntry& e : cl.buffer) covered.insert(e.id);
    }
    return covered;
}

inline double recall(const ActiveSet& a, const Partition& p, const OracleSet& o) {
    if (o.entry_ids.empty()) throw std::invalid_argument("recall: empty oracle");
    const auto covered = covered_entries(a, p);
    std::size_t hit = 0;
    for (EntryId id : o.entry_ids) hit += covered.count(id);
    return static_cast<double>(hit) / static_cast<double>(o.entry_ids.size());
}

inline double transfer_waste(const ActiveSet& a, const Partition& p, const OracleSet& o) {
    if (a.cids.empty()) throw std::invalid_argument("transfer_waste: empty active set");
    const auto covered = covered_entries(a, p);
    if (covered.empty()) return 0.0;
    std::size_t useless = 0;
    for (EntryId id : covered) useless += o.contains(id) ? 0 : 1;
    return static_cast<double>(useless) / static_cast<double>(covered.size());
}

}  // namespace dynakv

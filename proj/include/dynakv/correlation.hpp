#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "cluster_store.hpp"

namespace dynakv {

// Symmetric co-retrieval counts over the initial clusters. Built once from a
// warm-up window of active sets before decoding; the diagonal is excluded
// (a cluster always co-occurs with itself).
class CorrelationMatrix {
public:
    explicit CorrelationMatrix(std::size_t initial_clusters)
        : m0_(initial_clusters), counts_(initial_clusters * initial_clusters, 0) {}

    std::size_t size() const { return m0_; }
    std::uint64_t total() const { return total_; }

    void record(std::span<const ClusterId> active) {
        for (std::size_t a = 0; a < active.size(); ++a) {
            for (std::size_t b = a + 1; b < active.size(); ++b) {
                bump(active[a], active[b]);
            }
        }
    }

    std::uint64_t count(ClusterId i, ClusterId j) const { return counts_[index(i, j)]; }

    // P(ij) = f(C_i, C_j) / sum over all ordered pairs of f.
    double probability(ClusterId i, ClusterId j) const {
        if (total_ == 0) throw std::domain_error("co-retrieval probability: no observations");
        return static_cast<double>(count(i, j)) / static_cast<double>(total_);
    }

private:
    std::size_t index(ClusterId i, ClusterId j) const {
        if (i >= m0_ || j >= m0_) {
            throw std::out_of_range("correlation matrix: cid outside initial clusters");
        }
        return static_cast<std::size_t>(i) * m0_ + j;
    }

    void bump(ClusterId i, ClusterId j) {
        if (i == j) return;
        counts_[index(i, j)] += 1;
        counts_[index(j, i)] += 1;
        total_ += 2;
    }

    std::size_t m0_;
    std::vector<std::uint64_t> counts_;
    std::uint64_t total_ = 0;
};

using PoolPair = std::pair<ClusterId, std::optional<ClusterId>>;

// Greedy maximum-weight matching over observed co-retrieval counts. Pairs
// with zero count are never matched; leftovers keep an empty partner slot.
inline std::vector<PoolPair> pair_clusters(const CorrelationMatrix& m) {
    struct Candidate {
        std::uint64_t count;
        ClusterId i, j;
    };
    std::vector<Candidate> cands;
    for (ClusterId i = 0; i < m.size(); ++i) {
        for (ClusterId j = i + 1; j < m.size(); ++j) {
            if (m.count(i, j) > 0) cands.push_back({m.count(i, j), i, j});
        }
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        return std::tie(b.count, a.i, a.j) < std::tie(a.count, b.i, b.j);
    });

    std::vector<std::uint8_t> matched(m.size(), 0);
    std::vector<PoolPair> pairs;
    for (const Candidate& c : cands) {
        if (matched[c.i] || matched[c.j]) continue;
        matched[c.i] = matched[c.j] = 1;
        pairs.emplace_back(c.i, c.j);
    }
    for (ClusterId i = 0; i < m.size(); ++i) {
        if (!matched[i]) pairs.emplace_back(i, std::nullopt);
    }
    return pairs;
}

}  // namespace dynakv

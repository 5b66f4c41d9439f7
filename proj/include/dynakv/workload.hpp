#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cluster_store.hpp"
#include "rng.hpp"
#include "vector_stats.hpp"

namespace dynakv {

// Synthetic drifting stream: keys come from a Gaussian mixture whose
// component means random-walk during decode, so late entries sit far from
// any prefill-time cluster. Queries align with a sticky "topic" component
// and new entries follow the same topic, which makes the exact top-m
// concentrated but moving.
struct WorkloadConfig {
    std::uint64_t seed = 42;
    std::size_t dim = 64;
    std::size_t heads = 1;
    std::size_t layers = 16;  // pipeline model only
    std::size_t prefill_len = 1024;
    std::size_t decode_len = 4096;
    std::size_t mixture_components = 8;
    double drift_rate = 0.05;        // expected per-step mean displacement
    double query_temperature = 4.0;  // query alignment with the topic mean
    double query_stickiness = 0.8;   // P(topic repeats next step)
    double entry_topic_follow = 1.0;  // P(new entry comes from the query topic)
    double key_noise = 1.0;          // within-component spread (vector norm)
    double component_scale = 8.0;    // initial mean radius

    void validate() const {
        if (dim == 0 || heads == 0 || layers == 0 || prefill_len == 0 || decode_len == 0 ||
            mixture_components == 0) {
            throw std::invalid_argument("workload config: counts must be positive");
        }
        if (prefill_len < mixture_components) {
            throw std::invalid_argument("workload config: prefill_len < mixture_components");
        }
        if (drift_rate < 0.0 || query_stickiness < 0.0 || query_stickiness > 1.0 ||
            entry_topic_follow < 0.0 || entry_topic_follow > 1.0 || key_noise < 0.0 ||
            component_scale < 0.0 || query_temperature < 0.0) {
            throw std::invalid_argument("workload config: invalid scalar parameter");
        }
    }
};

struct DecodeStep {
    KvEntry entry;
    Vector query;
};

struct HeadTrace {
    std::vector<KvEntry> prefill;         // ids 0 .. L0-1
    std::vector<DecodeStep> steps;        // ids L0 .. L0+T-1
    std::vector<Vector> initial_means;    // component means before any drift
    std::vector<std::size_t> components;  // generating component per entry id
};

struct Trace {
    WorkloadConfig config;
    std::vector<HeadTrace> heads;

    std::size_t total_entries_per_head() const {
        return config.prefill_len + config.decode_len;
    }
};

inline Trace generate_workload(const WorkloadConfig& cfg) {
    cfg.validate();
    Trace trace;
    trace.config = cfg;
    trace.heads.reserve(cfg.heads);

    const double inv_sqrt_dim = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    for (std::size_t head = 0; head < cfg.heads; ++head) {
        Rng rng(derive_seed(cfg.seed, head));
        HeadTrace ht;

        std::vector<Vector> means;
        means.reserve(cfg.mixture_components);
        for (std::size_t g = 0; g < cfg.mixture_components; ++g) {
            means.push_back(rng.normal_vector(cfg.dim, cfg.component_scale * inv_sqrt_dim));
        }
        ht.initial_means = means;

        auto draw_key = [&](std::size_t g) {
            Vector k = means[g];
            for (double& x : k) x += cfg.key_noise * inv_sqrt_dim * rng.normal();
            return k;
        };

        ht.prefill.reserve(cfg.prefill_len);
        for (std::size_t i = 0; i < cfg.prefill_len; ++i) {
            const std::size_t g = static_cast<std::size_t>(rng.below(cfg.mixture_components));
            KvEntry e;
            e.id = i;
            e.origin = Origin::Prefill;
            e.key = draw_key(g);
            e.value = rng.normal_vector(cfg.dim);
            ht.components.push_back(g);
            ht.prefill.push_back(std::move(e));
        }

        std::size_t topic = static_cast<std::size_t>(rng.below(cfg.mixture_components));
        ht.steps.reserve(cfg.decode_len);
        for (std::size_t t = 0; t < cfg.decode_len; ++t) {
            for (Vector& m : means) {
                for (double& x : m) x += cfg.drift_rate * inv_sqrt_dim * rng.normal();
            }
            if (rng.uniform() >= cfg.query_stickiness) {
                topic = static_cast<std::size_t>(rng.below(cfg.mixture_components));
            }

            std::size_t entry_comp = topic;
            if (rng.uniform() >= cfg.entry_topic_follow) {
                entry_comp = static_cast<std::size_t>(rng.below(cfg.mixture_components));
            }
            DecodeStep step;
            step.entry.id = cfg.prefill_len + t;
            step.entry.origin = Origin::Decode;
            step.entry.key = draw_key(entry_comp);
            step.entry.value = rng.normal_vector(cfg.dim);
            ht.components.push_back(entry_comp);

            const Vector& m = means[topic];
            const double mn = norm(m);
            step.query.resize(cfg.dim);
            for (std::size_t d = 0; d < cfg.dim; ++d) {
                const double unit = mn > 0.0 ? m[d] / mn : 0.0;
                step.query[d] = cfg.query_temperature * unit + inv_sqrt_dim * rng.normal();
            }
            ht.steps.push_back(std::move(step));
        }
        trace.heads.push_back(std::move(ht));
    }
    return trace;
}

}  // namespace dynakv

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "cache.hpp"
#include "cluster_store.hpp"
#include "config.hpp"
#include "correlation.hpp"
#include "csv.hpp"
#include "flash_device.hpp"
#include "footprint.hpp"
#include "layout.hpp"
#include "retrieval.hpp"
#include "workload.hpp"

namespace dynakv {

enum class Strategy : std::uint8_t { NoCluster, StaticUpdate, LocalUpdate, DynaKV };
enum class LayoutMode : std::uint8_t { DualHead, Sequence };
enum class SelectionMode : std::uint8_t { TopK, Ratio, Budget };

inline std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::NoCluster: return "nocluster";
        case Strategy::StaticUpdate: return "static";
        case Strategy::LocalUpdate: return "local";
        case Strategy::DynaKV: return "dynakv";
    }
    return "?";
}

struct StrategyConfig {
    Strategy strategy = Strategy::DynaKV;
    std::size_t initial_clusters = 32;  // M0
    SelectionMode selection = SelectionMode::TopK;
    std::size_t topk = 8;
    double topk_ratio = 0.0;
    std::size_t fetch_budget_entries = 0;
    std::size_t oracle_m = 32;
    double alpha = 1.5;              // threshold calibration factor
    std::size_t buffer_budget = 16;  // B_max per head
    std::size_t local_window = 128;
    LayoutMode layout = LayoutMode::DualHead;
    Similarity similarity = Similarity::Dot;
    std::size_t warmup_steps = 64;  // co-retrieval observation window

    void validate() const {
        if (initial_clusters == 0) throw std::invalid_argument("strategy: M0 >= 1");
        if (selection == SelectionMode::TopK && topk == 0) {
            throw std::invalid_argument("strategy: topk >= 1");
        }
        if (selection == SelectionMode::Ratio && (topk_ratio <= 0.0 || topk_ratio > 1.0)) {
            throw std::invalid_argument("strategy: topk_ratio in (0, 1]");
        }
        if (selection == SelectionMode::Budget && fetch_budget_entries == 0) {
            throw std::invalid_argument("strategy: fetch_budget_entries >= 1");
        }
        if (strategy == Strategy::LocalUpdate && local_window == 0) {
            throw std::invalid_argument("strategy: local_window >= 1");
        }
    }
};

struct CacheSpec {
    CachePolicy policy = CachePolicy::ClusterAligned;
    double capacity_ratio = 0.2;        // of the final per-head KV bytes
    std::uint64_t capacity_bytes = 0;   // nonzero overrides the ratio
    double reserved_fraction = 0.2;
    std::uint64_t horizon = 16;
};

struct PipelineSpec {
    double compute_per_layer_s = 1e-3;
    double qkv_compute_s = 2e-4;
    bool virtualize_reps = false;
};

struct ExperimentConfig {
    WorkloadConfig workload;
    StrategyConfig strategy;
    DeviceConfig device;
    std::uint64_t device_capacity = 0;  // 0 = sized automatically
    CacheSpec cache;
    PipelineSpec pipeline;
    std::size_t hot_buffers = 64;
    std::uint64_t bridge_gap_bytes = UINT64_MAX;  // UINT64_MAX = device crossover
    bool dump_layout = false;
    bool dump_io_trace = false;

    void validate() const {
        workload.validate();
        strategy.validate();
        device.validate();
        if (strategy.initial_clusters > workload.prefill_len) {
            throw std::invalid_argument("config: initial_clusters > prefill_len");
        }
    }

    std::uint64_t record_bytes() const { return kv_record_bytes(workload.dim); }
    std::uint64_t rep_record_bytes() const { return 4 * workload.dim; }
};

inline ExperimentConfig experiment_from_kv(KeyValueConfig& kv) {
    ExperimentConfig c;
    c.workload.seed = kv.get_u64("seed", c.workload.seed);
    c.workload.dim = kv.get_u64("dim", c.workload.dim);
    c.workload.heads = kv.get_u64("heads", c.workload.heads);
    c.workload.layers = kv.get_u64("layers", c.workload.layers);
    c.workload.prefill_len = kv.get_u64("prefill_len", c.workload.prefill_len);
    c.workload.decode_len = kv.get_u64("decode_len", c.workload.decode_len);
    c.workload.mixture_components =
        kv.get_u64("mixture_components", c.workload.mixture_components);
    c.workload.drift_rate = kv.get_double("drift_rate", c.workload.drift_rate);
    c.workload.query_temperature =
        kv.get_double("query_temperature", c.workload.query_temperature);
    c.workload.query_stickiness =
        kv.get_double("query_stickiness", c.workload.query_stickiness);
    c.workload.entry_topic_follow =
        kv.get_double("entry_topic_follow", c.workload.entry_topic_follow);
    c.workload.key_noise = kv.get_double("key_noise", c.workload.key_noise);
    c.workload.component_scale = kv.get_double("component_scale", c.workload.component_scale);

    const std::string strat = kv.get_string("strategy", "dynakv");
    if (strat == "nocluster") {
        c.strategy.strategy = Strategy::NoCluster;
    } else if (strat == "static") {
        c.strategy.strategy = Strategy::StaticUpdate;
    } else if (strat == "local") {
        c.strategy.strategy = Strategy::LocalUpdate;
    } else if (strat == "dynakv") {
        c.strategy.strategy = Strategy::DynaKV;
    } else {
        throw std::runtime_error("config: unknown strategy '" + strat + "'");
    }
    c.strategy.initial_clusters = kv.get_u64("m0", c.strategy.initial_clusters);
    const bool has_topk = kv.has("topk");
    const bool has_ratio = kv.has("topk_ratio");
    const bool has_budget = kv.has("fetch_budget_entries");
    if (has_topk + has_ratio + has_budget > 1) {
        throw std::runtime_error("config: topk, topk_ratio, fetch_budget_entries are exclusive");
    }
    if (has_ratio) {
        c.strategy.selection = SelectionMode::Ratio;
        c.strategy.topk_ratio = kv.get_double("topk_ratio", 0.1);
    } else if (has_budget) {
        c.strategy.selection = SelectionMode::Budget;
        c.strategy.fetch_budget_entries = kv.get_u64("fetch_budget_entries", 128);
    } else {
        c.strategy.selection = SelectionMode::TopK;
        c.strategy.topk = kv.get_u64("topk", c.strategy.topk);
    }
    c.strategy.oracle_m = kv.get_u64("oracle_m", c.strategy.oracle_m);
    c.strategy.alpha = kv.get_double("alpha", c.strategy.alpha);
    c.strategy.buffer_budget = kv.get_u64("bmax", c.strategy.buffer_budget);
    c.strategy.local_window = kv.get_u64("local_window", c.strategy.local_window);
    const std::string lay = kv.get_string("layout", "dual_head");
    if (lay == "dual_head") {
        c.strategy.layout = LayoutMode::DualHead;
    } else if (lay == "sequence") {
        c.strategy.layout = LayoutMode::Sequence;
    } else {
        throw std::runtime_error("config: unknown layout '" + lay + "'");
    }
    const std::string sim = kv.get_string("similarity", "dot");
    if (sim == "dot") {
        c.strategy.similarity = Similarity::Dot;
    } else if (sim == "cosine") {
        c.strategy.similarity = Similarity::Cosine;
    } else {
        throw std::runtime_error("config: unknown similarity '" + sim + "'");
    }
    c.strategy.warmup_steps = kv.get_u64("warmup_steps", c.strategy.warmup_steps);

    c.device.page_size = kv.get_u64("page_size", c.device.page_size);
    c.device.cmd_overhead_s = kv.get_double("t_cmd_seconds", c.device.cmd_overhead_s);
    c.device.stream_bw = kv.get_double("stream_bw_bytes_per_sec", c.device.stream_bw);
    c.device.max_cmd_bytes = kv.get_u64("max_cmd_bytes", c.device.max_cmd_bytes);
    c.device.queue_depth = kv.get_u64("queue_depth", c.device.queue_depth);
    c.device_capacity = kv.get_u64("device_capacity_bytes", 0);

    const std::string pol = kv.get_string("cache_policy", "cluster_aligned");
    if (pol == "lru") {
        c.cache.policy = CachePolicy::Lru;
    } else if (pol == "cluster_aligned") {
        c.cache.policy = CachePolicy::ClusterAligned;
    } else {
        throw std::runtime_error("config: unknown cache_policy '" + pol + "'");
    }
    c.cache.capacity_ratio = kv.get_double("cache_ratio", c.cache.capacity_ratio);
    c.cache.capacity_bytes = kv.get_u64("cache_capacity_bytes", 0);
    c.cache.reserved_fraction = kv.get_double("reserved_fraction", c.cache.reserved_fraction);
    c.cache.horizon = kv.get_u64("update_retention_horizon", c.cache.horizon);

    c.pipeline.compute_per_layer_s =
        kv.get_double("compute_seconds_per_layer", c.pipeline.compute_per_layer_s);
    c.pipeline.qkv_compute_s = kv.get_double("qkv_compute_seconds", c.pipeline.qkv_compute_s);
    c.pipeline.virtualize_reps = kv.get_bool("virtualize_reps", false);

    c.hot_buffers = kv.get_u64("hot_buffers", c.hot_buffers);
    c.bridge_gap_bytes = kv.get_u64("bridge_gap_bytes", UINT64_MAX);
    c.dump_layout = kv.get_bool("dump_layout", false);
    c.dump_io_trace = kv.get_bool("dump_io_trace", false);

    kv.finish();
    c.validate();
    return c;
}

// Events consumed by layout baselines and the movement-oracle tests.
struct LayoutEvent {
    enum class Kind : std::uint8_t { Place, Append, Split };
    Kind kind = Kind::Place;
    ClusterId cid = 0;             // Place: new cluster; Append: target; Split: parent
    ClusterId other = 0;           // Split: new child
    std::uint64_t bytes = 0;       // Place: total; Append: record; Split: moved child bytes
    std::uint64_t keep_bytes = 0;  // Split: placed bytes staying with the parent
};

struct StepRow {
    std::uint64_t step = 0;
    std::uint64_t cluster_count = 0;
    std::uint64_t active_clusters = 0;
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
    double recall = 0.0;
    double waste = 0.0;
    std::uint64_t fetched_entries = 0;
    std::uint64_t fetched_bytes = 0;
    std::uint64_t slack_bytes = 0;
    std::uint64_t forced_load_bytes = 0;
    std::uint64_t rep_prefetch_bytes = 0;
    std::uint64_t read_bytes = 0;
    std::uint64_t written_bytes = 0;
    std::uint64_t physical_written_bytes = 0;
    std::uint64_t moved_bytes = 0;
    std::uint64_t commands = 0;
    std::uint64_t buffered_entries = 0;
    std::uint64_t deferrals = 0;
    std::uint64_t splits = 0;
    std::uint64_t forced_splits = 0;
    std::uint64_t evictions = 0;
    std::uint64_t resident_bytes = 0;
    double transfer_seconds = 0.0;
    double latency_serial_seconds = 0.0;
    double latency_overlapped_seconds = 0.0;
};

struct RunSummary {
    std::string strategy;
    std::uint64_t seed = 0;
    std::uint64_t heads = 0;
    std::uint64_t dim = 0;
    std::uint64_t prefill_len = 0;
    std::uint64_t decode_len = 0;
    std::uint64_t initial_clusters = 0;
    std::uint64_t final_cluster_count = 0;
    double mean_recall = 0.0;
    double mean_waste = 0.0;
    double mean_active_clusters = 0.0;
    double cache_hit_rate = 0.0;
    std::uint64_t total_read_bytes = 0;
    std::uint64_t total_fetched_bytes = 0;
    std::uint64_t total_slack_bytes = 0;
    std::uint64_t total_forced_load_bytes = 0;
    std::uint64_t total_rep_prefetch_bytes = 0;
    std::uint64_t total_relocation_read_bytes = 0;
    std::uint64_t total_written_bytes = 0;
    std::uint64_t total_physical_written_bytes = 0;
    std::uint64_t flush_logical_bytes = 0;
    std::uint64_t flush_physical_bytes = 0;
    std::uint64_t direct_logical_bytes = 0;
    std::uint64_t direct_physical_bytes = 0;
    std::uint64_t drain_logical_bytes = 0;
    std::uint64_t drain_physical_bytes = 0;
    std::uint64_t bulk_logical_bytes = 0;
    std::uint64_t bulk_physical_bytes = 0;
    std::uint64_t total_moved_bytes = 0;
    std::uint64_t total_commands = 0;
    double mean_access_entries = 0.0;
    std::uint64_t max_access_entries = 0;
    std::uint64_t total_splits = 0;
    std::uint64_t total_forced_splits = 0;
    std::uint64_t total_deferrals = 0;
    std::uint64_t total_evictions = 0;
    std::uint64_t cache_passthrough = 0;
    double sim_io_seconds = 0.0;
    double latency_serial_seconds = 0.0;
    double latency_overlapped_seconds = 0.0;
    std::uint64_t peak_resident_bytes = 0;
    std::uint64_t peak_virtualized_bytes = 0;
    std::uint64_t total_peak_bytes_all_layers = 0;
    double virtualization_savings_ratio = 0.0;
    std::uint64_t allocated_pool_bytes = 0;
    std::uint64_t live_flash_bytes = 0;
    double variance_mean = 0.0;
    double variance_p50 = 0.0;
    double variance_p90 = 0.0;

    std::vector<std::pair<std::string, CsvValue>> columns() const {
        return {
            {"strategy", strategy},
            {"seed", seed},
            {"heads", heads},
            {"dim", dim},
            {"prefill_len", prefill_len},
            {"decode_len", decode_len},
            {"initial_clusters", initial_clusters},
            {"final_cluster_count", final_cluster_count},
            {"mean_recall", mean_recall},
            {"mean_waste", mean_waste},
            {"mean_active_clusters", mean_active_clusters},
            {"cache_hit_rate", cache_hit_rate},
            {"total_read_bytes", total_read_bytes},
            {"total_fetched_bytes", total_fetched_bytes},
            {"total_slack_bytes", total_slack_bytes},
            {"total_forced_load_bytes", total_forced_load_bytes},
            {"total_rep_prefetch_bytes", total_rep_prefetch_bytes},
            {"total_relocation_read_bytes", total_relocation_read_bytes},
            {"total_written_bytes", total_written_bytes},
            {"total_physical_written_bytes", total_physical_written_bytes},
            {"flush_logical_bytes", flush_logical_bytes},
            {"flush_physical_bytes", flush_physical_bytes},
            {"direct_logical_bytes", direct_logical_bytes},
            {"direct_physical_bytes", direct_physical_bytes},
            {"drain_logical_bytes", drain_logical_bytes},
            {"drain_physical_bytes", drain_physical_bytes},
            {"bulk_logical_bytes", bulk_logical_bytes},
            {"bulk_physical_bytes", bulk_physical_bytes},
            {"total_moved_bytes", total_moved_bytes},
            {"total_commands", total_commands},
            {"mean_access_entries", mean_access_entries},
            {"max_access_entries", max_access_entries},
            {"total_splits", total_splits},
            {"total_forced_splits", total_forced_splits},
            {"total_deferrals", total_deferrals},
            {"total_evictions", total_evictions},
            {"cache_passthrough", cache_passthrough},
            {"sim_io_seconds", sim_io_seconds},
            {"latency_serial_seconds", latency_serial_seconds},
            {"latency_overlapped_seconds", latency_overlapped_seconds},
            {"peak_resident_bytes", peak_resident_bytes},
            {"peak_virtualized_bytes", peak_virtualized_bytes},
            {"total_peak_bytes_all_layers", total_peak_bytes_all_layers},
            {"virtualization_savings_ratio", virtualization_savings_ratio},
            {"allocated_pool_bytes", allocated_pool_bytes},
            {"live_flash_bytes", live_flash_bytes},
            {"variance_mean", variance_mean},
            {"variance_p50", variance_p50},
            {"variance_p90", variance_p90},
        };
    }
};

struct RunReport {
    ExperimentConfig config;
    std::vector<StepRow> steps;
    RunSummary summary;
    std::map<std::uint64_t, std::uint64_t> access_hist;  // entries per command
    std::vector<LayoutEvent> layout_events;
    std::string layout_text;
    std::string io_trace_text;
    // Final per-head partitions, for equality checks and snapshots.
    std::vector<Partition> partitions;
};

// ---------------------------------------------------------------------------

namespace detail {

struct HeadRun {
    Partition partition;
    std::unique_ptr<Layout> layout;
    SequenceLayout* sequence = nullptr;  // set when layout is sequence order
    std::unique_ptr<ClusterCache> cache;
    std::vector<KvEntry> entries;  // indexed by entry id
    std::vector<EntryId> window;   // local-update pending entries
    std::uint64_t window_flushes = 0;
    std::uint64_t rep_base = 0;
    std::uint64_t deferrals = 0;
    std::uint64_t splits = 0;
    std::uint64_t forced_splits = 0;
};

}  // namespace detail

class ExperimentRunner {
public:
    explicit ExperimentRunner(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
    }

    RunReport run() {
        const WorkloadConfig& w = cfg_.workload;
        const StrategyConfig& s = cfg_.strategy;
        trace_ = generate_workload(w);
        report_ = RunReport{};
        report_.config = cfg_;

        const std::uint64_t rec = cfg_.record_bytes();
        const std::uint64_t per_head_entries = w.prefill_len + w.decode_len;
        const std::uint64_t rep_region = per_head_entries * cfg_.rep_record_bytes();
        std::uint64_t capacity = cfg_.device_capacity;
        if (capacity == 0) {
            capacity = w.heads * (rep_region + 10 * per_head_entries * rec) + (64u << 20);
        }
        device_ = std::make_unique<FlashDevice>(capacity, cfg_.device);
        if (cfg_.dump_io_trace) device_->enable_trace();

        heads_.clear();
        heads_.resize(w.heads);
        for (std::size_t h = 0; h < w.heads; ++h) setup_head(h);

        const std::uint64_t steps = w.decode_len;
        report_.steps.reserve(steps);
        IoStats prev_io = device_->stats();
        for (std::uint64_t t = 0; t < steps; ++t) {
            StepRow row;
            row.step = t + 1;
            double recall_sum = 0.0, waste_sum = 0.0;
            for (std::size_t h = 0; h < w.heads; ++h) {
                run_step(h, t, row, recall_sum, waste_sum);
            }
            const IoStats now = device_->stats();
            row.read_bytes = now.read_bytes - prev_io.read_bytes;
            row.written_bytes = now.written_bytes - prev_io.written_bytes;
            row.physical_written_bytes =
                now.physical_written_bytes - prev_io.physical_written_bytes;
            row.moved_bytes = now.moved_bytes - prev_io.moved_bytes;
            row.commands = now.commands_issued - prev_io.commands_issued;
            row.transfer_seconds = now.simulated_time - prev_io.simulated_time;
            prev_io = now;

            row.recall = recall_sum / static_cast<double>(w.heads);
            row.waste = waste_sum / static_cast<double>(w.heads);
            for (std::size_t h = 0; h < w.heads; ++h) {
                if (heads_[h].cache) row.resident_bytes += heads_[h].cache->resident_bytes();
                if (s.strategy != Strategy::NoCluster) {
                    row.cluster_count += heads_[h].partition.size();
                    row.buffered_entries += heads_[h].partition.buffered_total();
                }
            }
            peak_resident_ = std::max(peak_resident_, row.resident_bytes + pinned_total());

            // Analytic per-token latency: every layer repeats this step's
            // transfer load; overlap hides the next layer's transfer behind
            // the current layer's compute.
            StageTiming timing;
            timing.compute_s.assign(w.layers, cfg_.pipeline.compute_per_layer_s);
            timing.transfer_s.assign(w.layers, row.transfer_seconds);
            row.latency_serial_seconds = pipeline_latency(timing, PipelineMode::Serial);
            row.latency_overlapped_seconds =
                pipeline_latency(timing, PipelineMode::Overlapped) + rep_exposed_this_step_;
            rep_exposed_this_step_ = 0.0;

            report_.steps.push_back(row);
        }

        finalize();
        return std::move(report_);
    }

private:
    std::uint64_t pinned_total() const {
        std::uint64_t total = 0;
        for (const auto& hr : heads_) {
            if (hr.cache) total += hr.cache->pinned_bytes();
        }
        return total;
    }

    void setup_head(std::size_t h) {
        const WorkloadConfig& w = cfg_.workload;
        const StrategyConfig& s = cfg_.strategy;
        detail::HeadRun& hr = heads_[h];
        const HeadTrace& ht = trace_.heads[h];

        hr.entries.reserve(w.prefill_len + w.decode_len);
        hr.entries.insert(hr.entries.end(), ht.prefill.begin(), ht.prefill.end());
        for (const DecodeStep& st : ht.steps) hr.entries.push_back(st.entry);

        RecordFn record_of = [this, h](EntryId id) {
            return encode_kv_record(heads_[h].entries.at(id));
        };
        LayoutConfig lc;
        lc.record_bytes = cfg_.record_bytes();
        lc.hot_buffers = cfg_.hot_buffers;
        lc.bridge_gap_bytes = cfg_.bridge_gap_bytes;
        const std::uint64_t max_entries = w.prefill_len + w.decode_len;

        hr.rep_base = device_->alloc(max_entries * cfg_.rep_record_bytes());

        CacheConfig cc;
        cc.policy = cfg_.cache.policy;
        cc.reserved_fraction = cfg_.cache.reserved_fraction;
        cc.update_retention_horizon = cfg_.cache.horizon;
        cc.capacity_bytes = cfg_.cache.capacity_bytes != 0
                                ? cfg_.cache.capacity_bytes
                                : static_cast<std::uint64_t>(
                                      cfg_.cache.capacity_ratio *
                                      static_cast<double>(max_entries * cfg_.record_bytes()));
        hr.cache = std::make_unique<ClusterCache>(cc);

        if (s.strategy == Strategy::NoCluster) {
            auto seq = std::make_unique<SequenceLayout>(*device_, lc, record_of, max_entries);
            std::vector<EntryId> prefill_ids(w.prefill_len);
            for (std::size_t i = 0; i < w.prefill_len; ++i) prefill_ids[i] = i;
            seq->place_new_cluster(0, prefill_ids);
            hr.sequence = seq.get();
            hr.layout = std::move(seq);
            return;
        }

        hr.partition = Partition::init(ht.prefill, s.initial_clusters,
                                       derive_seed(w.seed, 1000 + h), static_cast<int>(h), 0);
        if (s.strategy == Strategy::DynaKV) {
            hr.partition.set_threshold(calibrate_threshold(hr.partition, s.alpha));
        } else {
            hr.partition.set_threshold(std::numeric_limits<double>::infinity());
        }
        hr.partition.set_buffer_budget(s.buffer_budget);

        // Co-retrieval warm-up over the first decode queries against the
        // initial partition, then pairing and placement.
        CorrelationMatrix corr(s.initial_clusters);
        const std::size_t warm = std::min<std::size_t>(s.warmup_steps, ht.steps.size());
        for (std::size_t t = 0; t < warm; ++t) {
            const ActiveSet a = select(hr.partition, ht.steps[t].query);
            corr.record(a.cids);
        }
        const std::vector<PoolPair> pairs = pair_clusters(corr);

        if (s.layout == LayoutMode::DualHead) {
            hr.layout = std::make_unique<DualHeadLayout>(*device_, lc, record_of);
        } else {
            auto seq = std::make_unique<SequenceLayout>(*device_, lc, record_of, max_entries);
            hr.sequence = seq.get();
            hr.layout = std::move(seq);
        }
        hr.layout->place_initial(pairs, hr.partition.clusters());
        for (const auto& [cid, cl] : hr.partition.clusters()) {
            hr.partition.set_residency(cid, Residency::OnFlash);
            report_.layout_events.push_back({LayoutEvent::Kind::Place, cid, 0,
                                             cl.members.size() * cfg_.record_bytes(), 0});
        }
        if (!cfg_.pipeline.virtualize_reps) {
            hr.cache->set_pinned_bytes(hr.partition.size() * cfg_.rep_record_bytes());
        }
    }

    ActiveSet select(const Partition& p, const Vector& q) const {
        const StrategyConfig& s = cfg_.strategy;
        switch (s.selection) {
            case SelectionMode::TopK:
                return select_topk(q, p, s.topk, s.similarity);
            case SelectionMode::Ratio: {
                const std::size_t k = std::max<std::size_t>(
                    1, static_cast<std::size_t>(
                           std::ceil(s.topk_ratio * static_cast<double>(p.size()))));
                return select_topk(q, p, k, s.similarity);
            }
            case SelectionMode::Budget:
                return select_budget(q, p, s.fetch_budget_entries, s.similarity);
        }
        throw std::logic_error("unreachable");
    }

    std::uint64_t cluster_bytes(const detail::HeadRun& hr, ClusterId cid) const {
        return hr.partition.cluster(cid).members.size() * cfg_.record_bytes();
    }

    void run_step(std::size_t h, std::uint64_t t, StepRow& row, double& recall_sum,
                  double& waste_sum) {
        const WorkloadConfig& w = cfg_.workload;
        const StrategyConfig& s = cfg_.strategy;
        detail::HeadRun& hr = heads_[h];
        const HeadTrace& ht = trace_.heads[h];
        const DecodeStep& step = ht.steps[t];
        const std::int64_t st = static_cast<std::int64_t>(t);
        auto key_of = [&hr](EntryId id) -> const Vector& { return hr.entries.at(id).key; };

        const std::size_t population = w.prefill_len + t;
        const std::size_t m = std::min<std::size_t>(s.oracle_m, population);
        std::vector<std::pair<double, EntryId>> scored;
        OracleSet oracle;
        if (m > 0) {
            scored = score_entries(step.query, std::span(hr.entries.data(), population),
                                   s.similarity);
            oracle = top_m_of_scored(scored, m);
        }

        if (s.strategy == Strategy::NoCluster) {
            run_step_nocluster(hr, step, oracle, scored, row, recall_sum, waste_sum, population);
            return;
        }

        // Retrieval: representatives in fast memory (or streamed when
        // virtualized), then cluster fetch for cache misses.
        if (cfg_.pipeline.virtualize_reps) {
            const std::uint64_t rep_bytes = hr.partition.size() * cfg_.rep_record_bytes();
            ReadResult rr = device_->read(std::vector<Extent>{{hr.rep_base, rep_bytes}});
            row.rep_prefetch_bytes += rr.delta.read_bytes;
            rep_prefetch_bytes_ += rr.delta.read_bytes;
            rep_exposed_this_step_ += representative_prefetch_cost(
                rep_bytes, cfg_.pipeline.qkv_compute_s, cfg_.device);
        } else {
            hr.cache->set_pinned_bytes(hr.partition.size() * cfg_.rep_record_bytes());
        }

        const ActiveSet active = select(hr.partition, step.query);
        row.active_clusters += active.size();

        LookupResult lk = hr.cache->lookup(active.cids, st);
        row.hits += lk.hits.size();
        row.misses += lk.misses.size();

        std::uint64_t fetched_entries = 0;
        if (!lk.misses.empty()) {
            FetchResult fr = hr.layout->fetch(lk.misses);
            row.fetched_bytes += fr.live_bytes;
            row.slack_bytes += fr.slack_bytes;
            fetched_bytes_ += fr.live_bytes;
            slack_bytes_ += fr.slack_bytes;
            for (std::uint64_t len : fr.command_lengths) {
                const std::uint64_t entries = std::max<std::uint64_t>(
                    1, (len + cfg_.record_bytes() / 2) / cfg_.record_bytes());
                report_.access_hist[entries] += 1;
                access_entries_sum_ += static_cast<double>(len) /
                                       static_cast<double>(cfg_.record_bytes());
                access_cmds_ += 1;
                max_access_entries_ = std::max(max_access_entries_, entries);
            }
            for (ClusterId cid : lk.misses) {
                fetched_entries += hr.partition.cluster(cid).members.size();
            }
        }
        row.fetched_entries += fetched_entries;

        // Retrieval quality against the exact oracle. Deferred buffers and
        // the local-update window are memory resident, hence covered.
        if (m > 0) {
            std::unordered_set<EntryId> covered = covered_entries(active, hr.partition);
            if (s.strategy == Strategy::LocalUpdate) {
                covered.insert(hr.window.begin(), hr.window.end());
            }
            std::size_t hit = 0;
            for (EntryId id : oracle.entry_ids) hit += covered.count(id);
            recall_sum += static_cast<double>(hit) / static_cast<double>(oracle.entry_ids.size());
            if (!covered.empty()) {
                std::size_t useless = 0;
                for (EntryId id : covered) useless += oracle.contains(id) ? 0 : 1;
                waste_sum += static_cast<double>(useless) / static_cast<double>(covered.size());
            }
        }

        // Ingest the new entry.
        if (s.strategy == Strategy::LocalUpdate) {
            hr.window.push_back(step.entry.id);
            if (hr.window.size() >= s.local_window) flush_local_window(h, st, row);
        } else {
            IngestOutcome out = hr.partition.ingest(step.entry, active.cids, key_of);
            switch (out.kind) {
                case IngestOutcome::Kind::Appended:
                    hr.layout->append_entry(out.cid, step.entry.id);
                    report_.layout_events.push_back(
                        {LayoutEvent::Kind::Append, out.cid, 0, cfg_.record_bytes(), 0});
                    hr.cache->mark_updated(out.cid, st);
                    hr.cache->update_size(out.cid, cluster_bytes(hr, out.cid), st);
                    break;
                case IngestOutcome::Kind::SplitNow:
                    handle_split(h, st, out.cid, out.new_cid, out.absorbed, row);
                    break;
                case IngestOutcome::Kind::Deferred:
                    hr.deferrals += 1;
                    row.deferrals += 1;
                    break;
            }
        }

        // Deferred splits for clusters that were loaded this step, then the
        // buffer budget.
        for (const SplitEvent& ev : hr.partition.flush_deferred(active.cids, key_of)) {
            handle_split(h, st, ev.parent, ev.new_cid, ev.absorbed, row);
        }
        auto forced = hr.partition.enforce_buffer_budget(key_of, [&](ClusterId cid) {
            const auto extents = hr.layout->locate_cluster(cid);
            if (!extents.empty()) {
                ReadResult rr = device_->read(extents);
                row.forced_load_bytes += rr.delta.read_bytes;
                forced_load_bytes_ += rr.delta.read_bytes;
            }
        });
        if (forced) {
            hr.forced_splits += 1;
            row.forced_splits += 1;
            handle_split(h, st, forced->split.parent, forced->split.new_cid,
                         forced->split.absorbed, row);
        }

        // Cache admission for everything brought into memory this step.
        std::vector<std::pair<ClusterId, std::uint64_t>> admitted;
        for (ClusterId cid : lk.misses) {
            if (hr.partition.contains(cid)) {
                admitted.emplace_back(cid, cluster_bytes(hr, cid));
            }
        }
        row.evictions += hr.cache->admit_and_evict(admitted, st).size();
    }

    void run_step_nocluster(detail::HeadRun& hr, const DecodeStep& step, const OracleSet& oracle,
                            const std::vector<std::pair<double, EntryId>>& scored, StepRow& row,
                            double& recall_sum, double& waste_sum, std::size_t population) {
        const StrategyConfig& s = cfg_.strategy;
        // The costed no-cluster baseline: fetch the exact top-B entries as
        // individual reads in token order.
        const std::size_t budget = s.selection == SelectionMode::Budget
                                       ? s.fetch_budget_entries
                                       : s.oracle_m;
        const std::size_t b = std::min<std::size_t>(budget, population);
        OracleSet wanted = oracle;
        if (b != oracle.entry_ids.size()) {
            wanted = top_m_of_scored(scored, b);
        }
        FetchResult fr = hr.sequence->fetch_entries(wanted.entry_ids);
        row.fetched_bytes += fr.live_bytes;
        row.slack_bytes += fr.slack_bytes;
        fetched_bytes_ += fr.live_bytes;
        slack_bytes_ += fr.slack_bytes;
        row.fetched_entries += wanted.entry_ids.size();
        for (std::uint64_t len : fr.command_lengths) {
            const std::uint64_t entries = std::max<std::uint64_t>(
                1, (len + cfg_.record_bytes() / 2) / cfg_.record_bytes());
            report_.access_hist[entries] += 1;
            access_entries_sum_ +=
                static_cast<double>(len) / static_cast<double>(cfg_.record_bytes());
            access_cmds_ += 1;
            max_access_entries_ = std::max(max_access_entries_, entries);
        }

        if (!oracle.entry_ids.empty()) {
            std::size_t hit = 0;
            for (EntryId id : oracle.entry_ids) {
                hit += std::binary_search(wanted.entry_ids.begin(), wanted.entry_ids.end(), id)
                           ? 1
                           : 0;
            }
            recall_sum += static_cast<double>(hit) / static_cast<double>(oracle.entry_ids.size());
            std::size_t useless = 0;
            for (EntryId id : wanted.entry_ids) useless += oracle.contains(id) ? 0 : 1;
            waste_sum +=
                static_cast<double>(useless) / static_cast<double>(wanted.entry_ids.size());
        }
        hr.sequence->append_entry(0, step.entry.id);
        report_.layout_events.push_back(
            {LayoutEvent::Kind::Append, 0, 0, cfg_.record_bytes(), 0});
    }

    void flush_local_window(std::size_t h, std::int64_t st, StepRow& row) {
        const WorkloadConfig& w = cfg_.workload;
        const StrategyConfig& s = cfg_.strategy;
        detail::HeadRun& hr = heads_[h];

        const double avg_init = static_cast<double>(w.prefill_len) /
                                static_cast<double>(s.initial_clusters);
        const std::size_t k = std::max<std::size_t>(
            1, static_cast<std::size_t>(
                   std::ceil(static_cast<double>(hr.window.size()) / avg_init)));

        std::vector<const Vector*> keys;
        keys.reserve(hr.window.size());
        for (EntryId id : hr.window) keys.push_back(&hr.entries.at(id).key);
        const auto assign = kmeans_assign(
            keys, std::min(k, keys.size()),
            derive_seed(w.seed, 2000 + h * 4096 + hr.window_flushes));
        hr.window_flushes += 1;

        std::map<std::size_t, std::vector<EntryId>> groups;
        for (std::size_t i = 0; i < hr.window.size(); ++i) {
            groups[assign[i]].push_back(hr.window[i]);
        }
        for (const auto& [g, ids] : groups) {
            std::vector<const Vector*> pts;
            for (EntryId id : ids) pts.push_back(&hr.entries.at(id).key);
            const ClusterId cid = hr.partition.add_cluster(ids, batch_stats(pts));
            hr.layout->place_new_cluster(cid, ids);
            hr.partition.set_residency(cid, Residency::OnFlash);
            report_.layout_events.push_back({LayoutEvent::Kind::Place, cid, 0,
                                             ids.size() * cfg_.record_bytes(), 0});
            hr.cache->mark_updated(cid, st);
            std::vector<std::pair<ClusterId, std::uint64_t>> admit{
                {cid, ids.size() * cfg_.record_bytes()}};
            row.evictions += hr.cache->admit_and_evict(admit, st).size();
        }
        hr.window.clear();
    }

    void handle_split(std::size_t h, std::int64_t st, ClusterId parent, ClusterId fresh,
                      const std::vector<EntryId>& absorbed, StepRow& row) {
        detail::HeadRun& hr = heads_[h];
        hr.splits += 1;
        row.splits += 1;

        const Cluster& child_b = hr.partition.cluster(fresh);
        const std::unordered_set<EntryId> absorbed_set(absorbed.begin(), absorbed.end());
        std::uint64_t moved_placed = 0;
        for (EntryId id : child_b.members) {
            if (!absorbed_set.count(id)) moved_placed += cfg_.record_bytes();
        }
        const Cluster& child_a = hr.partition.cluster(parent);
        std::uint64_t keep_placed = 0;
        for (EntryId id : child_a.members) {
            if (!absorbed_set.count(id)) keep_placed += cfg_.record_bytes();
        }
        report_.layout_events.push_back(
            {LayoutEvent::Kind::Split, parent, fresh, moved_placed, keep_placed});

        hr.layout->apply_split(parent, fresh, child_b.members);
        // Entries that had been held in memory are placed now.
        for (EntryId id : absorbed) {
            const ClusterId target =
                std::binary_search(child_b.members.begin(), child_b.members.end(), id) ? fresh
                                                                                       : parent;
            hr.layout->append_entry(target, id);
            report_.layout_events.push_back(
                {LayoutEvent::Kind::Append, target, 0, cfg_.record_bytes(), 0});
        }
        hr.partition.set_residency(parent, Residency::OnFlash);
        hr.partition.set_residency(fresh, Residency::OnFlash);
        hr.cache->on_split(parent, cluster_bytes(hr, parent), fresh, cluster_bytes(hr, fresh),
                           st);
    }

    void finalize() {
        const WorkloadConfig& w = cfg_.workload;
        const StrategyConfig& s = cfg_.strategy;
        RunSummary& sum = report_.summary;
        sum.strategy = strategy_name(s.strategy);
        sum.seed = w.seed;
        sum.heads = w.heads;
        sum.dim = w.dim;
        sum.prefill_len = w.prefill_len;
        sum.decode_len = w.decode_len;
        sum.initial_clusters = s.initial_clusters;

        double recall_acc = 0.0, waste_acc = 0.0, active_acc = 0.0;
        for (const StepRow& r : report_.steps) {
            recall_acc += r.recall;
            waste_acc += r.waste;
            active_acc += static_cast<double>(r.active_clusters) / static_cast<double>(w.heads);
            sum.total_splits += r.splits;
            sum.total_forced_splits += r.forced_splits;
            sum.total_deferrals += r.deferrals;
            sum.total_evictions += r.evictions;
            sum.latency_serial_seconds += r.latency_serial_seconds;
            sum.latency_overlapped_seconds += r.latency_overlapped_seconds;
        }
        const double n = static_cast<double>(report_.steps.size());
        sum.mean_recall = n > 0 ? recall_acc / n : 0.0;
        sum.mean_waste = n > 0 ? waste_acc / n : 0.0;
        sum.mean_active_clusters = n > 0 ? active_acc / n : 0.0;

        std::uint64_t hits = 0, misses = 0;
        std::vector<double> variances;
        for (std::size_t h = 0; h < heads_.size(); ++h) {
            detail::HeadRun& hr = heads_[h];
            if (hr.cache) {
                hits += hr.cache->stats().hits;
                misses += hr.cache->stats().misses;
                sum.cache_passthrough += hr.cache->stats().passthrough;
            }
            if (s.strategy != Strategy::NoCluster) {
                sum.final_cluster_count += hr.partition.size();
                for (const auto& [cid, cl] : hr.partition.clusters()) {
                    variances.push_back(cl.stats.variance());
                }
                if (!hr.partition.audit_conservation()) {
                    throw std::logic_error("conservation violated at end of run");
                }
            }
            sum.allocated_pool_bytes += hr.layout ? hr.layout->allocated_bytes() : 0;
            sum.live_flash_bytes += hr.layout ? hr.layout->total_live_bytes() : 0;
            if (hr.layout) {
                const WriteAccounting& wa = hr.layout->write_accounting();
                sum.flush_logical_bytes += wa.flush_logical;
                sum.flush_physical_bytes += wa.flush_physical;
                sum.direct_logical_bytes += wa.direct_logical;
                sum.direct_physical_bytes += wa.direct_physical;
                sum.drain_logical_bytes += wa.drain_logical;
                sum.drain_physical_bytes += wa.drain_physical;
                sum.bulk_logical_bytes += wa.bulk_logical;
                sum.bulk_physical_bytes += wa.bulk_physical;
                sum.total_relocation_read_bytes += hr.layout->relocation_read_bytes();
            }
        }
        sum.cache_hit_rate =
            hits + misses > 0 ? static_cast<double>(hits) / static_cast<double>(hits + misses)
                              : 0.0;
        if (!variances.empty()) {
            double acc = 0.0;
            for (double v : variances) acc += v;
            sum.variance_mean = acc / static_cast<double>(variances.size());
            sum.variance_p50 = percentile_nearest_rank(variances, 50.0);
            sum.variance_p90 = percentile_nearest_rank(variances, 90.0);
        }

        const IoStats& io = device_->stats();
        sum.total_read_bytes = io.read_bytes;
        sum.total_written_bytes = io.written_bytes;
        sum.total_physical_written_bytes = io.physical_written_bytes;
        sum.total_moved_bytes = io.moved_bytes;
        sum.total_commands = io.commands_issued;
        sum.sim_io_seconds = io.simulated_time;
        sum.total_fetched_bytes = fetched_bytes_;
        sum.total_slack_bytes = slack_bytes_;
        sum.total_forced_load_bytes = forced_load_bytes_;
        sum.total_rep_prefetch_bytes = rep_prefetch_bytes_;
        sum.mean_access_entries = access_cmds_ > 0
                                      ? access_entries_sum_ / static_cast<double>(access_cmds_)
                                      : 0.0;
        sum.max_access_entries = max_access_entries_;

        // I/O accounting closure: every read byte is a miss fetch, a forced
        // load, a representative prefetch, or a spill relocation.
        const std::uint64_t accounted = fetched_bytes_ + slack_bytes_ + forced_load_bytes_ +
                                        rep_prefetch_bytes_ + sum.total_relocation_read_bytes;
        if (accounted != io.read_bytes) {
            throw std::logic_error("I/O accounting closure violated: read_bytes=" +
                                   std::to_string(io.read_bytes) + " accounted=" +
                                   std::to_string(accounted));
        }

        sum.peak_resident_bytes = peak_resident_;
        std::vector<std::uint64_t> layer_bytes(w.layers, peak_resident_);
        sum.peak_virtualized_bytes = virtualized_peak_bytes(layer_bytes);
        sum.total_peak_bytes_all_layers = total_peak_bytes(layer_bytes);
        sum.virtualization_savings_ratio =
            sum.peak_virtualized_bytes > 0
                ? static_cast<double>(sum.total_peak_bytes_all_layers) /
                      static_cast<double>(sum.peak_virtualized_bytes)
                : 0.0;

        if (cfg_.dump_layout) {
            std::ostringstream os;
            for (std::size_t h = 0; h < heads_.size(); ++h) {
                os << "# head " << h << "\n";
                if (heads_[h].layout) heads_[h].layout->dump(os);
            }
            report_.layout_text = os.str();
        }
        if (cfg_.dump_io_trace) {
            std::ostringstream os;
            device_->dump_trace(os);
            report_.io_trace_text = os.str();
        }
        for (auto& hr : heads_) {
            if (s.strategy != Strategy::NoCluster) {
                report_.partitions.push_back(hr.partition);
            }
        }
    }

    ExperimentConfig cfg_;
    Trace trace_;
    std::unique_ptr<FlashDevice> device_;
    std::vector<detail::HeadRun> heads_;
    RunReport report_;
    std::uint64_t fetched_bytes_ = 0;
    std::uint64_t slack_bytes_ = 0;
    std::uint64_t forced_load_bytes_ = 0;
    std::uint64_t rep_prefetch_bytes_ = 0;
    std::uint64_t peak_resident_ = 0;
    double access_entries_sum_ = 0.0;
    std::uint64_t access_cmds_ = 0;
    std::uint64_t max_access_entries_ = 0;
    double rep_exposed_this_step_ = 0.0;
};

inline RunReport run_experiment(const ExperimentConfig& cfg) {
    ExperimentRunner runner(cfg);
    return runner.run();
}

// ---------------------------------------------------------------------------
// Report output.

inline CsvWriter step_csv(const RunReport& r) {
    CsvWriter csv({"step",
                   "cluster_count",
                   "active_clusters",
                   "hits",
                   "misses",
                   "recall",
                   "waste",
                   "fetched_entries",
                   "fetched_bytes",
                   "slack_bytes",
                   "forced_load_bytes",
                   "rep_prefetch_bytes",
                   "read_bytes",
                   "written_bytes",
                   "physical_written_bytes",
                   "moved_bytes",
                   "commands",
                   "buffered_entries",
                   "deferrals",
                   "splits",
                   "forced_splits",
                   "evictions",
                   "resident_bytes",
                   "transfer_seconds",
                   "latency_serial_seconds",
                   "latency_overlapped_seconds"});
    for (const StepRow& s : r.steps) {
        csv.add_row({s.step,
                     s.cluster_count,
                     s.active_clusters,
                     s.hits,
                     s.misses,
                     s.recall,
                     s.waste,
                     s.fetched_entries,
                     s.fetched_bytes,
                     s.slack_bytes,
                     s.forced_load_bytes,
                     s.rep_prefetch_bytes,
                     s.read_bytes,
                     s.written_bytes,
                     s.physical_written_bytes,
                     s.moved_bytes,
                     s.commands,
                     s.buffered_entries,
                     s.deferrals,
                     s.splits,
                     s.forced_splits,
                     s.evictions,
                     s.resident_bytes,
                     s.transfer_seconds,
                     s.latency_serial_seconds,
                     s.latency_overlapped_seconds});
    }
    return csv;
}

inline CsvWriter summary_csv(const RunReport& r) {
    const auto cols = r.summary.columns();
    std::vector<std::string> names;
    std::vector<CsvValue> vals;
    for (const auto& [name, v] : cols) {
        names.push_back(name);
        vals.push_back(v);
    }
    CsvWriter csv(names);
    csv.add_row(vals);
    return csv;
}

inline CsvWriter access_hist_csv(const RunReport& r) {
    CsvWriter csv({"entries_per_access", "count"});
    for (const auto& [len, count] : r.access_hist) {
        csv.add_row({len, count});
    }
    return csv;
}

inline void write_report(const RunReport& r, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    {
        std::ofstream f(fs::path(out_dir) / "report.csv");
        step_csv(r).write(f);
    }
    {
        std::ofstream f(fs::path(out_dir) / "summary.csv");
        summary_csv(r).write(f);
    }
    {
        std::ofstream f(fs::path(out_dir) / "access_hist.csv");
        access_hist_csv(r).write(f);
    }
    if (!r.layout_text.empty()) {
        std::ofstream f(fs::path(out_dir) / "layout.txt");
        f << r.layout_text;
    }
    if (!r.io_trace_text.empty()) {
        std::ofstream f(fs::path(out_dir) / "io_trace.txt");
        f << r.io_trace_text;
    }
}

// Side-by-side numeric summary with ratios against the first run. All runs
// must share the workload seed.
inline CsvWriter compare_strategies(std::span<const RunReport> runs) {
    if (runs.size() < 2) throw std::invalid_argument("compare: need >= 2 runs");
    for (const RunReport& r : runs) {
        if (r.config.workload.seed != runs[0].config.workload.seed) {
            throw std::invalid_argument("compare: workload seeds differ");
        }
    }
    std::vector<std::string> cols{"metric"};
    for (const RunReport& r : runs) cols.push_back(r.summary.strategy);
    for (std::size_t i = 1; i < runs.size(); ++i) {
        cols.push_back("ratio_" + runs[i].summary.strategy + "_vs_" + runs[0].summary.strategy);
    }
    CsvWriter csv(cols);

    const auto base_cols = runs[0].summary.columns();
    for (std::size_t m = 0; m < base_cols.size(); ++m) {
        const std::string& name = base_cols[m].first;
        auto numeric = [&](const RunReport& r) -> std::optional<double> {
            const CsvValue& v = r.summary.columns()[m].second;
            if (std::holds_alternative<double>(v)) return std::get<double>(v);
            if (std::holds_alternative<std::uint64_t>(v)) {
                return static_cast<double>(std::get<std::uint64_t>(v));
            }
            if (std::holds_alternative<std::int64_t>(v)) {
                return static_cast<double>(std::get<std::int64_t>(v));
            }
            return std::nullopt;
        };
        if (!numeric(runs[0])) continue;  // skip non-numeric metrics
        std::vector<CsvValue> row{name};
        for (const RunReport& r : runs) row.push_back(*numeric(r));
        const double base = *numeric(runs[0]);
        for (std::size_t i = 1; i < runs.size(); ++i) {
            const double v = *numeric(runs[i]);
            row.push_back(base != 0.0 ? v / base : (v == 0.0 ? 1.0 : 0.0));
        }
        csv.add_row(row);
    }
    return csv;
}

}  // namespace dynakv

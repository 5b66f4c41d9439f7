#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynakv {

// Two-parameter command cost model: every command pays a fixed overhead plus
// streaming time. Small commands are IOPS-bound, large ones approach the
// stream bandwidth; the crossover sits at cmd_overhead_s * stream_bw bytes
// (~24 KB with the defaults, matching measured UFS behaviour).
struct DeviceConfig {
    std::uint64_t page_size = 4096;
    double cmd_overhead_s = 8.5e-6;
    double stream_bw = 2.9e9;  // bytes/second
    std::uint64_t max_cmd_bytes = 512 * 1024;
    std::uint32_t queue_depth = 32;  // recorded only, not modelled

    void validate() const {
        if (page_size == 0 || cmd_overhead_s <= 0.0 || stream_bw <= 0.0 ||
            max_cmd_bytes == 0 || queue_depth == 0) {
            throw std::invalid_argument("device config: all parameters must be positive");
        }
        if (max_cmd_bytes % page_size != 0) {
            throw std::invalid_argument("device config: max_cmd_bytes must be page aligned");
        }
    }

    std::uint64_t crossover_bytes() const {
        return static_cast<std::uint64_t>(cmd_overhead_s * stream_bw);
    }
};

inline double effective_bandwidth(std::uint64_t io_size, const DeviceConfig& cfg) {
    if (io_size == 0) throw std::invalid_argument("effective_bandwidth: io_size must be > 0");
    const double s = static_cast<double>(io_size);
    return s / (cfg.cmd_overhead_s + s / cfg.stream_bw);
}

struct Extent {
    std::uint64_t offset = 0;
    std::uint64_t length = 0;

    std::uint64_t end() const { return offset + length; }
    bool operator==(const Extent&) const = default;
};

struct IoStats {
    std::uint64_t read_bytes = 0;
    std::uint64_t written_bytes = 0;
    std::uint64_t physical_written_bytes = 0;  // page amplified
    std::uint64_t commands_issued = 0;
    std::uint64_t moved_bytes = 0;  // relocation traffic
    double simulated_time = 0.0;    // seconds

    IoStats& operator+=(const IoStats& o) {
        read_bytes += o.read_bytes;
        written_bytes += o.written_bytes;
        physical_written_bytes += o.physical_written_bytes;
        commands_issued += o.commands_issued;
        moved_bytes += o.moved_bytes;
        simulated_time += o.simulated_time;
        return *this;
    }
};

struct ReadResult {
    std::vector<std::uint8_t> data;  // input extents concatenated in order
    IoStats delta;
    std::vector<std::uint64_t> command_lengths;  // bytes per issued command
};

// Page-addressed simulated flash store with exact I/O accounting and a
// deterministic clock. Single writer; allocation is a simple bump pointer.
class FlashDevice {
public:
    explicit FlashDevice(std::uint64_t capacity, DeviceConfig cfg = {})
        : cfg_(cfg), store_(capacity, 0) {
        cfg_.validate();
    }

    const DeviceConfig& config() const { return cfg_; }
    std::uint64_t capacity() const { return store_.size(); }
    const IoStats& stats() const { return stats_; }

    std::uint64_t alloc(std::uint64_t bytes, std::uint64_t align = 0) {
        if (align == 0) align = cfg_.page_size;
        std::uint64_t base = (alloc_cursor_ + align - 1) / align * align;
        if (base + bytes > store_.size()) {
            throw std::runtime_error("flash device: out of space (capacity " +
                                     std::to_string(store_.size()) + " bytes)");
        }
        alloc_cursor_ = base + bytes;
        return base;
    }
    std::uint64_t allocated() const { return alloc_cursor_; }

    ReadResult read(std::span<const Extent> extents) {
        for (const Extent& e : extents) check_extent(e);
        ReadResult r;

        // Cost model runs over merged runs: adjacent or overlapping extents
        // coalesce into one command, chopped at max_cmd_bytes.
        std::vector<Extent> sorted(extents.begin(), extents.end());
        std::sort(sorted.begin(), sorted.end(),
                  [](const Extent& a, const Extent& b) { return a.offset < b.offset; });
        std::uint64_t run_start = 0, run_end = 0;
        bool open = false;
        auto emit = [&](std::uint64_t lo, std::uint64_t hi) {
            std::uint64_t pos = lo;
            while (pos < hi) {
                const std::uint64_t len = std::min(hi - pos, cfg_.max_cmd_bytes);
                account_command('R', pos, len, r.delta);
                r.command_lengths.push_back(len);
                pos += len;
            }
        };
        for (const Extent& e : sorted) {
            if (!open) {
                run_start = e.offset;
                run_end = e.end();
                open = true;
            } else if (e.offset <= run_end) {
                run_end = std::max(run_end, e.end());
            } else {
                emit(run_start, run_end);
                run_start = e.offset;
                run_end = e.end();
            }
        }
        if (open) emit(run_start, run_end);

        for (const Extent& e : extents) {
            r.data.insert(r.data.end(), store_.begin() + static_cast<std::ptrdiff_t>(e.offset),
                          store_.begin() + static_cast<std::ptrdiff_t>(e.end()));
        }
        stats_ += r.delta;
        return r;
    }

    IoStats write(std::uint64_t offset, std::span<const std::uint8_t> payload) {
        if (payload.empty()) return {};
        check_extent({offset, payload.size()});
        std::memcpy(store_.data() + offset, payload.data(), payload.size());

        IoStats delta;
        const std::uint64_t first_page = offset / cfg_.page_size;
        const std::uint64_t last_page = (offset + payload.size() - 1) / cfg_.page_size;
        const std::uint64_t physical = (last_page - first_page + 1) * cfg_.page_size;
        delta.written_bytes = payload.size();
        delta.physical_written_bytes = physical;
        std::uint64_t pos = 0;
        while (pos < physical) {
            const std::uint64_t len = std::min(physical - pos, cfg_.max_cmd_bytes);
            account_command('W', first_page * cfg_.page_size + pos, len, delta);
            pos += len;
        }
        stats_ += delta;
        return delta;
    }

    // Uncosted copy, for relocating data that is already memory resident
    // (the caller fetched it earlier in the step).
    std::vector<std::uint8_t> peek(const Extent& e) const {
        check_extent(e);
        return {store_.begin() + static_cast<std::ptrdiff_t>(e.offset),
                store_.begin() + static_cast<std::ptrdiff_t>(e.end())};
    }

    void note_moved(std::uint64_t bytes) { stats_.moved_bytes += bytes; }

    void enable_trace(bool on = true) { trace_enabled_ = on; }
    void dump_trace(std::ostream& os) const {
        for (const auto& t : trace_) {
            char line[96];
            std::snprintf(line, sizeof(line), "%c %llu %llu %.9f\n", t.op,
                          static_cast<unsigned long long>(t.offset),
                          static_cast<unsigned long long>(t.length), t.time);
            os << line;
        }
    }

private:
    struct TraceCmd {
        char op;
        std::uint64_t offset;
        std::uint64_t length;
        double time;
    };

    void check_extent(const Extent& e) const {
        if (e.length == 0) throw std::out_of_range("flash device: zero-length extent");
        if (e.offset > store_.size() || e.end() > store_.size()) {
            throw std::out_of_range("flash device: extent out of bounds");
        }
    }

    void account_command(char op, std::uint64_t offset, std::uint64_t len, IoStats& delta) {
        const double t = cfg_.cmd_overhead_s + static_cast<double>(len) / cfg_.stream_bw;
        delta.commands_issued += 1;
        delta.simulated_time += t;
        if (op == 'R') delta.read_bytes += len;
        if (trace_enabled_) trace_.push_back({op, offset, len, t});
    }

    DeviceConfig cfg_;
    std::vector<std::uint8_t> store_;
    IoStats stats_;
    std::uint64_t alloc_cursor_ = 0;
    bool trace_enabled_ = false;
    std::vector<TraceCmd> trace_;
};

}  // namespace dynakv

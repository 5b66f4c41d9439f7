#pragma once

#include <cstdint>
#include <stdexcept>

namespace dynakv {

struct ModelShape {
    std::uint32_t layers = 0;
    std::uint32_t kv_heads = 0;
    std::uint32_t head_dim = 0;
    std::uint32_t bytes_per_element = 2;

    void validate() const {
        if (layers == 0 || kv_heads == 0 || head_dim == 0 || bytes_per_element == 0) {
            throw std::invalid_argument("model shape: all fields must be positive");
        }
    }
};

// Key+value cache bytes for one sequence: layers x 2 x kv_heads x head_dim x
// seq_len x bytes_per_element.
inline std::uint64_t estimate_kvcache_bytes(const ModelShape& m, std::uint64_t seq_len) {
    m.validate();
    return static_cast<std::uint64_t>(m.layers) * 2 * m.kv_heads * m.head_dim * seq_len *
           m.bytes_per_element;
}

inline double bytes_to_gb(std::uint64_t bytes) { return static_cast<double>(bytes) / 1e9; }

}  // namespace dynakv

#pragma once

#include <cstdint>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace dynakv {

// Fixed-precision decimal for doubles keeps outputs byte-identical across
// runs with the same seed.
inline std::string format_fixed(double v, int precision = 9) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
    return buf;
}

using CsvValue = std::variant<std::int64_t, std::uint64_t, double, std::string>;

class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    void add_row(std::vector<CsvValue> row) {
        if (row.size() != columns_.size()) {
            throw std::invalid_argument("csv row width mismatch");
        }
        rows_.push_back(std::move(row));
    }

    void write(std::ostream& os) const {
        for (std::size_t i = 0; i < columns_.size(); ++i) {
            os << (i ? "," : "") << columns_[i];
        }
        os << "\n";
        for (const auto& row : rows_) {
            for (std::size_t i = 0; i < row.size(); ++i) {
                if (i) os << ",";
                std::visit(
                    [&](const auto& v) {
                        using T = std::decay_t<decltype(v)>;
                        if constexpr (std::is_same_v<T, double>) {
                            os << format_fixed(v);
                        } else {
                            os << v;
                        }
                    },
                    row[i]);
            }
            os << "\n";
        }
    }

    std::size_t rows() const { return rows_.size(); }
    const std::vector<std::string>& columns() const { return columns_; }

private:
    std::vector<std::string> columns_;
    std::vector<std::vector<CsvValue>> rows_;
};

}  // namespace dynakv

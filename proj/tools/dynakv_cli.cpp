// Benchmark harness CLI: run single experiments, compare strategies on a
// shared workload seed, sweep one parameter, or estimate KV cache footprints.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dynakv/config.hpp"
#include "dynakv/csv.hpp"
#include "dynakv/footprint.hpp"
#include "dynakv/harness.hpp"

namespace fs = std::filesystem;

namespace {

dynakv::ExperimentConfig load_config(const std::string& path, std::int64_t seed_override) {
    dynakv::KeyValueConfig kv = dynakv::KeyValueConfig::parse_file(path);
    if (seed_override >= 0) kv.override_value("seed", std::to_string(seed_override));
    return dynakv::experiment_from_kv(kv);
}

void print_run_brief(const dynakv::RunReport& r) {
    const auto& s = r.summary;
    std::cout << "strategy=" << s.strategy << " seed=" << s.seed
              << " mean_recall=" << dynakv::format_fixed(s.mean_recall, 4)
              << " mean_waste=" << dynakv::format_fixed(s.mean_waste, 4)
              << " read_bytes=" << s.total_read_bytes << " commands=" << s.total_commands
              << " hit_rate=" << dynakv::format_fixed(s.cache_hit_rate, 4)
              << " clusters=" << s.final_cluster_count << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adaptive KV cluster management benchmark over a simulated "
                 "memory/flash hierarchy. Retrieval quality is reported as "
                 "recall against an exact brute-force oracle, not end-task "
                 "accuracy."};
    app.require_subcommand(1);

    std::string config_path, out_dir, param;
    std::vector<std::string> config_paths, values;
    std::int64_t seed_override = -1;

    auto* run = app.add_subcommand("run", "Run one experiment");
    run->add_option("--config", config_path, "config file (key = value lines)")->required();
    run->add_option("--out", out_dir, "output directory")->required();
    run->add_option("--seed", seed_override, "override workload seed");

    auto* compare = app.add_subcommand("compare", "Run several configs on one seed");
    compare->add_option("--configs", config_paths, "config files")->required()->expected(2, -1);
    compare->add_option("--out", out_dir, "output directory")->required();
    compare->add_option("--seed", seed_override, "override workload seed for all runs");

    auto* sweep = app.add_subcommand("sweep", "Sweep one config key over values");
    sweep->add_option("--config", config_path, "base config file")->required();
    sweep->add_option("--param", param, "config key to vary")->required();
    sweep->add_option("--values", values, "values (comma separated or repeated)")
        ->required()
        ->delimiter(',');
    sweep->add_option("--out", out_dir, "output directory")->required();
    sweep->add_option("--seed", seed_override, "override workload seed");

    std::uint32_t layers = 0, kv_heads = 0, head_dim = 0, bytes_per_element = 2;
    std::uint64_t seq_len = 0;
    auto* estimate = app.add_subcommand("estimate", "KV cache footprint for a model shape");
    estimate->add_option("--layers", layers)->required();
    estimate->add_option("--kv-heads", kv_heads)->required();
    estimate->add_option("--head-dim", head_dim)->required();
    estimate->add_option("--bytes", bytes_per_element, "bytes per element (default 2)");
    estimate->add_option("--seq-len", seq_len)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            const auto cfg = load_config(config_path, seed_override);
            const auto report = dynakv::run_experiment(cfg);
            dynakv::write_report(report, out_dir);
            print_run_brief(report);
        } else if (compare->parsed()) {
            std::vector<dynakv::RunReport> reports;
            for (const std::string& path : config_paths) {
                reports.push_back(dynakv::run_experiment(load_config(path, seed_override)));
            }
            fs::create_directories(out_dir);
            for (std::size_t i = 0; i < reports.size(); ++i) {
                dynakv::write_report(reports[i],
                                     (fs::path(out_dir) / ("run_" + std::to_string(i))).string());
                print_run_brief(reports[i]);
            }
            std::ofstream f(fs::path(out_dir) / "comparison.csv");
            dynakv::compare_strategies(reports).write(f);
        } else if (sweep->parsed()) {
            fs::create_directories(out_dir);
            std::vector<std::string> names;
            std::vector<std::vector<dynakv::CsvValue>> rows;
            for (const std::string& v : values) {
                dynakv::KeyValueConfig kv = dynakv::KeyValueConfig::parse_file(config_path);
                if (seed_override >= 0) kv.override_value("seed", std::to_string(seed_override));
                kv.override_value(param, v);
                const auto cfg = dynakv::experiment_from_kv(kv);
                const auto report = dynakv::run_experiment(cfg);
                dynakv::write_report(report, (fs::path(out_dir) / (param + "_" + v)).string());
                print_run_brief(report);
                auto cols = report.summary.columns();
                if (names.empty()) {
                    names.push_back(param);
                    for (const auto& [n, val] : cols) names.push_back(n);
                }
                std::vector<dynakv::CsvValue> row{v};
                for (const auto& [n, val] : cols) row.push_back(val);
                rows.push_back(std::move(row));
            }
            dynakv::CsvWriter csv(names);
            for (auto& r : rows) csv.add_row(std::move(r));
            std::ofstream f(fs::path(out_dir) / "sweep.csv");
            csv.write(f);
        } else if (estimate->parsed()) {
            dynakv::ModelShape shape{layers, kv_heads, head_dim, bytes_per_element};
            const std::uint64_t bytes = dynakv::estimate_kvcache_bytes(shape, seq_len);
            std::cout << "kvcache_bytes=" << bytes
                      << " gb=" << dynakv::format_fixed(dynakv::bytes_to_gb(bytes), 3) << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

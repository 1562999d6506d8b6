#pragma once
// TTFT/TPOT measurement harness: a (prompt length x policy) sweep over
// synthetic prompts with warm-up, repeats, dispersion, speedups against the
// full-attention baseline, and the realized KV footprint per cell.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "kvband/cost_model.hpp"
#include "kvband/model.hpp"

namespace kvband {

struct BenchConfig {
    ModelConfig model;
    std::vector<std::size_t> prompt_lens{1024, 2048, 4096};
    // Compact policy strings; must include "full", the speedup baseline.
    std::vector<std::string> policies{"full", "speed:6", "speed:4"};
    int max_new{128};
    int repeats{5};
    int warmup{1};
    std::uint64_t prompt_seed{123};

    // Throws std::invalid_argument on empty axes, repeats < 1, warmup < 0,
    // max_new < 1, a missing "full" baseline, or an unparsable policy.
    void validate() const;
};

struct BenchRow {
    std::size_t prompt_len{0};
    std::string policy;
    DurationStats ttft_ms;
    DurationStats tpot_ms;
    double ttft_speedup{1.0};  // full-baseline mean / this mean
    double tpot_speedup{1.0};
    std::uint64_t kv_bytes{0};  // realized closed-form footprint of one run
    double kv_gib{0.0};
    double kv_reduction_pct{0.0};  // vs the full baseline, exact byte ratio
    double proxy_reduction_pct{0.0};
    // Raw per-repeat samples (not serialized to CSV).
    std::vector<double> ttft_ms_samples;
    std::vector<double> tpot_ms_samples;
};

struct BenchReport {
    BenchConfig config;
    std::vector<BenchRow> rows;
};

// Runs the sweep. TTFT covers prefill through the first generated token's
// selection; TPOT is the remaining decode wall time divided by max_new.
// Writes one progress line per cell to `progress` when given. Throws
// std::runtime_error when the steady clock is too coarse to resolve the
// measurements (sub-millisecond cells on a >1us-tick clock).
BenchReport run_bench(const BenchConfig& config, std::ostream* progress = nullptr);

// CSV: header prompt_len,policy,ttft_ms_mean,ttft_ms_std,ttft_speedup,
// tpot_ms_mean,tpot_ms_std,tpot_speedup,kv_gib,kv_reduction_pct,
// proxy_reduction_pct. Reading back and re-serializing is byte-identical.
std::string bench_csv_string(std::span<const BenchRow> rows);
void write_bench_csv(std::span<const BenchRow> rows, const std::filesystem::path& path);
std::vector<BenchRow> read_bench_csv(std::istream& in);

// Full report with config metadata alongside the rows.
nlohmann::json bench_report_json(const BenchReport& report);

}  // namespace kvband

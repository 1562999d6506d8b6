#include "kvband/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "kvband/engine.hpp"

namespace kvband {

namespace {

using Clock = std::chrono::steady_clock;

constexpr const char* kCsvHeader =
    "prompt_len,policy,ttft_ms_mean,ttft_ms_std,ttft_speedup,tpot_ms_mean,tpot_ms_std,"
    "tpot_speedup,kv_gib,kv_reduction_pct,proxy_reduction_pct";

double clock_granularity_seconds() {
    double best = std::numeric_limits<double>::infinity();
    for (int probe = 0; probe < 5; ++probe) {
        const auto a = Clock::now();
        auto b = Clock::now();
        while (b == a) b = Clock::now();
        best = std::min(best, std::chrono::duration<double>(b - a).count());
    }
    return best;
}

DurationStats stats_of(const std::vector<double>& samples) {
    DurationStats s;
    for (const double v : samples) s.mean += v;
    s.mean /= static_cast<double>(samples.size());
    if (samples.size() > 1) {
        double acc = 0.0;
        for (const double v : samples) acc += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(acc / static_cast<double>(samples.size() - 1));
    }
    return s;
}

CostInputs realized_inputs(const ModelConfig& model, const VisibilityPolicy& policy,
                           std::size_t prompt_len, int max_new) {
    CostInputs c;
    c.L = model.n_layers;
    c.K = policy.effective_cutoff(model.n_layers);
    c.a = policy.anchor_bos ? 1u : 0u;
    c.N = static_cast<std::uint64_t>(prompt_len) - c.a - 1u;
    c.T = static_cast<std::uint64_t>(max_new);
    c.n_kv = model.n_kv_heads;
    c.d_head = model.d_head;
    c.b = 2;
    return c;
}

}  // namespace

void BenchConfig::validate() const {
    model.validate();
    if (prompt_lens.empty()) throw std::invalid_argument("bench: no prompt lengths");
    if (policies.empty()) throw std::invalid_argument("bench: no policies");
    if (max_new < 1) throw std::invalid_argument("bench: max_new must be >= 1");
    if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
    if (warmup < 0) throw std::invalid_argument("bench: warmup must be >= 0");
    bool has_full = false;
    for (const std::string& p : policies) {
        if (VisibilityPolicy::parse(p).kind == PolicyKind::FullAttn) has_full = true;
    }
    if (!has_full) {
        throw std::invalid_argument("bench: policies must include the \"full\" baseline");
    }
}

BenchReport run_bench(const BenchConfig& config, std::ostream* progress) {
    config.validate();
    const ModelWeights weights = init_weights(config.model);
    const double granularity = clock_granularity_seconds();

    BenchReport report;
    report.config = config;

    for (const std::size_t len : config.prompt_lens) {
        std::vector<BenchRow> rows;

        for (const std::string& policy_text : config.policies) {
            const VisibilityPolicy policy = VisibilityPolicy::parse(policy_text);
            const std::vector<int> prompt =
                synthetic_prompt(config.model, policy, len, config.prompt_seed);

            BenchRow row;
            row.prompt_len = len;
            row.policy = policy_text;
            for (int r = 0; r < config.warmup + config.repeats; ++r) {
                const GenerationTrace trace = generate(weights, policy, prompt, config.max_new);
                if (r < config.warmup) continue;
                const double decode_ms = trace.decode_seconds * 1e3;
                const double ttft_ms = trace.prefill_seconds * 1e3;
                if (granularity > 1e-6 && (ttft_ms < 1.0 || decode_ms < 1.0)) {
                    std::ostringstream msg;
                    msg << "bench: steady clock granularity " << granularity
                        << "s cannot resolve cell prompt_len=" << len << " policy=" << policy_text
                        << " (ttft " << ttft_ms << "ms, decode " << decode_ms
                        << "ms); raise prompt_len/max_new";
                    throw std::runtime_error(msg.str());
                }
                row.ttft_ms_samples.push_back(ttft_ms);
                row.tpot_ms_samples.push_back(decode_ms / config.max_new);
            }
            row.ttft_ms = stats_of(row.ttft_ms_samples);
            row.tpot_ms = stats_of(row.tpot_ms_samples);

            const CostInputs c = realized_inputs(config.model, policy, len, config.max_new);
            row.kv_bytes = bytes_speed(c);
            row.kv_gib = to_gib(row.kv_bytes);
            row.proxy_reduction_pct = layer_token_proxy(c).reduction_pct;
            rows.push_back(std::move(row));
        }

        const auto baseline_it =
            std::find_if(rows.begin(), rows.end(), [](const BenchRow& r) {
                return VisibilityPolicy::parse(r.policy).kind == PolicyKind::FullAttn;
            });
        const BenchRow& baseline = *baseline_it;  // validate() guarantees one exists

        for (BenchRow& row : rows) {
            row.kv_reduction_pct =
                100.0 * (1.0 - static_cast<double>(row.kv_bytes) /
                                   static_cast<double>(baseline.kv_bytes));
            row.ttft_speedup = speedup_ratio(baseline.ttft_ms, row.ttft_ms);
            row.tpot_speedup = speedup_ratio(baseline.tpot_ms, row.tpot_ms);
            if (progress) {
                *progress << "bench prompt_len=" << row.prompt_len << " policy=" << row.policy
                          << " ttft_ms=" << row.ttft_ms.mean << "+/-" << row.ttft_ms.stddev
                          << " tpot_ms=" << row.tpot_ms.mean << "+/-" << row.tpot_ms.stddev
                          << " ttft_speedup=" << row.ttft_speedup << '\n';
            }
            report.rows.push_back(row);
        }
    }
    return report;
}

std::string bench_csv_string(std::span<const BenchRow> rows) {
    std::ostringstream out;
    out << kCsvHeader << '\n';
    out << std::fixed;
    for (const BenchRow& row : rows) {
        out << row.prompt_len << ',' << row.policy << ',';
        out << std::setprecision(3) << row.ttft_ms.mean << ',' << row.ttft_ms.stddev << ','
            << row.ttft_speedup << ',' << row.tpot_ms.mean << ',' << row.tpot_ms.stddev << ','
            << row.tpot_speedup << ',';
        out << std::setprecision(6) << row.kv_gib << ',';
        out << std::setprecision(1) << row.kv_reduction_pct << ',' << row.proxy_reduction_pct
            << '\n';
    }
    return out.str();
}

void write_bench_csv(std::span<const BenchRow> rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_bench_csv: cannot open " + path.string());
    out << bench_csv_string(rows);
    if (!out.flush()) throw std::runtime_error("write_bench_csv: write failed");
}

std::vector<BenchRow> read_bench_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kCsvHeader) {
        throw std::invalid_argument("read_bench_csv: missing or mismatched header");
    }
    std::vector<BenchRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (fields.size() != 11) {
            throw std::invalid_argument("read_bench_csv: malformed row '" + line + "'");
        }
        BenchRow row;
        row.prompt_len = std::stoull(fields[0]);
        row.policy = fields[1];
        row.ttft_ms.mean = std::stod(fields[2]);
        row.ttft_ms.stddev = std::stod(fields[3]);
        row.ttft_speedup = std::stod(fields[4]);
        row.tpot_ms.mean = std::stod(fields[5]);
        row.tpot_ms.stddev = std::stod(fields[6]);
        row.tpot_speedup = std::stod(fields[7]);
        row.kv_gib = std::stod(fields[8]);
        row.kv_reduction_pct = std::stod(fields[9]);
        row.proxy_reduction_pct = std::stod(fields[10]);
        rows.push_back(std::move(row));
    }
    return rows;
}

nlohmann::json bench_report_json(const BenchReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const BenchRow& row : report.rows) {
        rows.push_back({{"prompt_len", row.prompt_len},
                        {"policy", row.policy},
                        {"ttft_ms", {{"mean", row.ttft_ms.mean}, {"stddev", row.ttft_ms.stddev}}},
                        {"tpot_ms", {{"mean", row.tpot_ms.mean}, {"stddev", row.tpot_ms.stddev}}},
                        {"ttft_speedup", row.ttft_speedup},
                        {"tpot_speedup", row.tpot_speedup},
                        {"kv_bytes", row.kv_bytes},
                        {"kv_gib", row.kv_gib},
                        {"kv_reduction_pct", row.kv_reduction_pct},
                        {"proxy_reduction_pct", row.proxy_reduction_pct},
                        {"ttft_ms_samples", row.ttft_ms_samples},
                        {"tpot_ms_samples", row.tpot_ms_samples}});
    }
    return nlohmann::json{{"model", config_to_json(report.config.model)},
                          {"prompt_lens", report.config.prompt_lens},
                          {"policies", report.config.policies},
                          {"max_new", report.config.max_new},
                          {"repeats", report.config.repeats},
                          {"warmup", report.config.warmup},
                          {"prompt_seed", report.config.prompt_seed},
                          {"rows", rows}};
}

}  // namespace kvband

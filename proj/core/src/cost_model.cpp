#include "kvband/cost_model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "kvband/policy.hpp"

namespace kvband {

void CostInputs::validate() const {
    if (L < 1) throw std::invalid_argument("CostInputs: L must be >= 1");
    if (K < 1 || K > L) throw std::invalid_argument("CostInputs: K must satisfy 1 <= K <= L");
    if (n_kv < 1 || d_head < 1 || b < 1) {
        throw std::invalid_argument("CostInputs: kv shape/byte width must be positive");
    }
}

std::uint64_t bytes_kv_per_token(int n_kv, int d_head, int b) {
    return 2ull * static_cast<std::uint64_t>(n_kv) * static_cast<std::uint64_t>(d_head) *
           static_cast<std::uint64_t>(b);
}

std::uint64_t bytes_full(const CostInputs& c) {
    c.validate();
    return bytes_kv_per_token(c.n_kv, c.d_head, c.b) * static_cast<std::uint64_t>(c.L) *
           (c.N + c.a + c.T);
}

std::uint64_t bytes_speed(const CostInputs& c) {
    c.validate();
    const std::uint64_t l = static_cast<std::uint64_t>(c.L);
    const std::uint64_t k = static_cast<std::uint64_t>(c.K);
    return bytes_kv_per_token(c.n_kv, c.d_head, c.b) * (k * c.N + l * c.a + l * c.T);
}

double to_gib(std::uint64_t bytes) {
    return static_cast<double>(bytes) / static_cast<double>(1ull << 30);
}

double round_decimals(double value, int decimals) {
    const double scale = std::pow(10.0, decimals);
    return std::round(value * scale) / scale;
}

CostInputs reference_preset(std::uint64_t prompt_len, int cutoff_k) {
    if (prompt_len < 1) throw std::invalid_argument("reference_preset: prompt_len must be >= 1");
    CostInputs c;
    c.L = 32;
    c.K = cutoff_k;
    c.N = prompt_len - 1;
    c.a = 1;
    c.T = 128;
    c.n_kv = 8;
    c.d_head = 128;
    c.b = 2;
    c.validate();
    return c;
}

namespace {

bool matches_reference_shape(const CostInputs& c) {
    return c.L == 32 && c.a == 1 && c.T == 128 && c.n_kv == 8 && c.d_head == 128 && c.b == 2;
}

}  // namespace

double flops_estimate(std::uint64_t prompt_len, int cutoff_k) {
    if (prompt_len < 1) throw std::invalid_argument("flops_estimate: prompt_len must be >= 1");
    if (cutoff_k < 1 || cutoff_k > 32) {
        throw std::invalid_argument("flops_estimate: cutoff outside [1, 32]");
    }
    const double s = static_cast<double>(prompt_len);
    const double n = static_cast<double>(prompt_len - 1);
    const double a = kFlopsA0 + kFlopsA1 * s;
    const double b = kFlopsB0 + kFlopsB1 * n + kFlopsB2 * n * n;
    return a + static_cast<double>(cutoff_k) * b;
}

ProxyReport layer_token_proxy(const CostInputs& c) {
    c.validate();
    ProxyReport report;
    const std::uint64_t l = static_cast<std::uint64_t>(c.L);
    const std::uint64_t k = static_cast<std::uint64_t>(c.K);
    report.full_units = l * (c.N + c.a);
    report.speed_units = k * c.N + l * c.a;
    report.unit_reduction_pct =
        report.full_units == 0
            ? 0.0
            : 100.0 * (1.0 - static_cast<double>(report.speed_units) /
                                 static_cast<double>(report.full_units));
    if (matches_reference_shape(c)) {
        const std::uint64_t prompt_len = c.N + c.a;
        report.flops_full = flops_estimate(prompt_len, c.L);
        report.flops_speed = flops_estimate(prompt_len, c.K);
        report.reduction_pct = 100.0 * (1.0 - *report.flops_speed / *report.flops_full);
    } else {
        report.reduction_pct = report.unit_reduction_pct;
    }
    return report;
}

double speedup_ratio(const DurationStats& baseline, const DurationStats& variant) {
    if (!(baseline.mean > 0.0) || !(variant.mean > 0.0)) {
        throw std::invalid_argument("speedup_ratio: means must be positive");
    }
    return baseline.mean / variant.mean;
}

std::vector<CostRow> cost_table(const CostInputs& shape, std::span<const std::uint64_t> prompt_lens,
                                std::span<const std::string> policies) {
    std::vector<CostRow> rows;
    rows.reserve(prompt_lens.size() * policies.size());
    for (const std::uint64_t len : prompt_lens) {
        if (len < 1 + shape.a) {
            throw std::invalid_argument("cost_table: prompt length shorter than the anchor");
        }
        CostInputs c = shape;
        c.N = len - shape.a;
        CostInputs full_inputs = c;
        full_inputs.K = c.L;
        const std::uint64_t full_bytes = bytes_full(full_inputs);
        for (const std::string& policy_text : policies) {
            const VisibilityPolicy policy = VisibilityPolicy::parse(policy_text);
            CostRow row;
            row.prompt_len = len;
            row.policy = policy.to_string();
            c.K = policy.effective_cutoff(c.L);
            row.bytes = bytes_speed(c);
            row.gib = to_gib(row.bytes);
            row.reduction_pct =
                100.0 * (1.0 - static_cast<double>(row.bytes) / static_cast<double>(full_bytes));
            const ProxyReport proxy = layer_token_proxy(c);
            row.proxy_units = proxy.speed_units;
            row.proxy_reduction_pct = proxy.reduction_pct;
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::string cost_csv_string(std::span<const CostRow> rows) {
    std::ostringstream out;
    out << "prompt_len,policy,bytes,gib,reduction_pct,proxy_units,proxy_reduction_pct\n";
    out.setf(std::ios::fixed);
    for (const CostRow& row : rows) {
        out << row.prompt_len << ',' << row.policy << ',' << row.bytes << ',';
        out.precision(3);
        out << row.gib << ',';
        out.precision(1);
        out << row.reduction_pct << ',' << row.proxy_units << ',' << row.proxy_reduction_pct
            << '\n';
    }
    return std::move(out).str();
}

void write_cost_csv(std::span<const CostRow> rows, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_cost_csv: cannot open " + path.string());
    out << cost_csv_string(rows);
    if (!out) throw std::runtime_error("write_cost_csv: write failed for " + path.string());
}

}  // namespace kvband

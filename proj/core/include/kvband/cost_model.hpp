#pragma once
// Closed-form memory and compute scaling for banded KV visibility.
//
// Symbols: L layers, K cutoff, N non-anchor prefill tokens, a anchor tokens,
// T cached decode-phase tokens (the generation trigger plus generated tokens),
// n_kv KV heads, d_head head dim, b accounting bytes per scalar.
//
//   B_KV        = 2 * n_kv * d_head * b          (one token's K+V at one layer)
//   bytes_full  = B_KV * L * (N + a + T)
//   bytes_speed = B_KV * (K*N + L*a + L*T)

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kvband {

struct CostInputs {
    int L{32};
    int K{32};
    std::uint64_t N{0};  // non-anchor prefill tokens
    std::uint64_t a{0};  // anchor tokens (0 or 1 here)
    std::uint64_t T{0};  // cached decode-phase tokens
    int n_kv{8};
    int d_head{128};
    int b{2};

    // Throws std::invalid_argument unless 1 <= K <= L and shapes are positive.
    void validate() const;
};

std::uint64_t bytes_kv_per_token(int n_kv, int d_head, int b);
std::uint64_t bytes_full(const CostInputs& c);
std::uint64_t bytes_speed(const CostInputs& c);

// GiB means 2^30 bytes; published tables report 3 decimals.
double to_gib(std::uint64_t bytes);
double round_decimals(double value, int decimals);

// The 8B-scale reference preset behind the published sweep tables:
// L=32, n_kv=8, d_head=128, b=2, a=1, T=128; prompt length S gives N = S-1
// (the anchor is excluded and the trigger token is counted in T with the
// generated continuation).
CostInputs reference_preset(std::uint64_t prompt_len, int cutoff_k);
inline constexpr std::uint64_t kReferenceSweepLens[] = {1024,  2048,  4096,  8192,
                                                        16384, 32768, 65536, 131072};
inline constexpr int kReferenceSweepCutoffs[] = {16, 20, 24, 28};

// Whole-model FLOPs estimate for the reference preset, linear in the cutoff:
//   flops(S, K) = A(S) + K * B(N),   N = S - 1
//   A(S) = kA0 + kA1*S        cutoff-independent work (MLP/projection/decode)
//   B(N) = kB0 + kB1*N + kB2*N^2   per-prefill-visible-layer work
// Constants calibrated against the published sweep for an 8B-scale reference
// model; they reproduce every published reduction percentage to <= 0.05 pp.
// Full-attention cost is flops_estimate(S, L).
inline constexpr double kFlopsA0 = 249845000000000.0 / 127.0;
inline constexpr double kFlopsA1 = 17044921875.0 / 254.0;
inline constexpr double kFlopsB0 = -309581370493359375.0 / 233046016.0;
inline constexpr double kFlopsB1 = 152504423519921875.0 / 349569024.0;
inline constexpr double kFlopsB2 = 11544119921875.0 / 699138048.0;
double flops_estimate(std::uint64_t prompt_len, int cutoff_k);

// Layer-token scaling proxy: L*(N+a) -> K*N + L*a. A scaling proxy rather
// than a complete latency model.
//
// unit_reduction_pct is the pure unit ratio 100*(1 - speed/full). For inputs
// matching the reference preset shape, reduction_pct comes from the
// calibrated whole-model FLOPs estimate (flops_* fields populated); for any
// other shape it falls back to unit_reduction_pct and the flops fields are
// absent.
struct ProxyReport {
    std::uint64_t full_units{0};
    std::uint64_t speed_units{0};
    double unit_reduction_pct{0.0};
    double reduction_pct{0.0};
    std::optional<double> flops_full;
    std::optional<double> flops_speed;
};
ProxyReport layer_token_proxy(const CostInputs& c);

struct DurationStats {
    double mean{0.0};
    double stddev{0.0};
};
// baseline.mean / variant.mean; throws std::invalid_argument unless both
// means are positive.
double speedup_ratio(const DurationStats& baseline, const DurationStats& variant);

// One evaluated (prompt length, policy) cell of a cost table.
struct CostRow {
    std::uint64_t prompt_len{0};
    std::string policy;
    std::uint64_t bytes{0};
    double gib{0.0};
    double reduction_pct{0.0};        // vs FullAttn, exact byte ratio
    std::uint64_t proxy_units{0};     // speed_units (== full_units for FullAttn)
    double proxy_reduction_pct{0.0};  // ProxyReport::reduction_pct
};
// Evaluates the grid; policies are compact policy strings ("full", "speed:24",
// "speed+bos:24", ...). FullAttn rows use K = L. Throws on invalid inputs.
std::vector<CostRow> cost_table(const CostInputs& shape, std::span<const std::uint64_t> prompt_lens,
                                std::span<const std::string> policies);
// CSV with header prompt_len,policy,bytes,gib,reduction_pct,proxy_units,
// proxy_reduction_pct. Throws std::runtime_error on unwritable path.
void write_cost_csv(std::span<const CostRow> rows, const std::filesystem::path& path);
std::string cost_csv_string(std::span<const CostRow> rows);

}  // namespace kvband

#pragma once
// Layered KV cache that materializes entries according to the visibility
// policy's rule — prefill-body tokens only through layers 1..K, anchor and
// decode-phase tokens at every layer — and accounts bytes exactly.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "kvband/policy.hpp"

namespace kvband {

struct KvEntry {
    std::size_t position{0};
    TokenClass token_class{TokenClass::PrefillBody};
    std::vector<float> key;    // n_kv_heads * d_head, rope applied at `position`
    std::vector<float> value;  // n_kv_heads * d_head
};

class LayeredKvCache {
  public:
    // Throws std::invalid_argument on inconsistent shape parameters
    // (n_layers < 1, cutoff outside [1, n_layers] for banded policies).
    LayeredKvCache(int n_layers, const VisibilityPolicy& policy, int n_kv_heads, int d_head);

    // Appends by the materialization rule: PrefillBody entries are accepted
    // iff layer <= K; BosAnchor and decode-phase entries are accepted at all
    // layers. Returns false when the rule rejects the entry (silent by
    // contract so the engine can run one uniform per-layer loop). Throws
    // std::invalid_argument on out-of-order positions, bad layer index, or
    // wrong key/value width.
    bool append(int layer, KvEntry entry);

    // Materialized entries of one layer, ascending by position.
    // Throws std::invalid_argument on bad layer index.
    std::span<const KvEntry> read_band(int layer) const;

    // Sum over layers of |entries(layer)| * 2 * n_kv * d_head * b. The byte
    // parameters are explicit because accounting precision (b = 2, bf16-style)
    // is decoupled from compute precision (f32).
    std::uint64_t bytes_used(int n_kv_heads, int d_head, int bytes_per_scalar) const;

    int n_layers() const { return n_layers_; }
    int cutoff() const { return cutoff_k_; }
    const VisibilityPolicy& policy() const { return policy_; }
    std::size_t entry_count(int layer) const { return read_band(layer).size(); }
    std::size_t total_entries() const;

    // Per-layer entry counts and byte totals.
    nlohmann::json debug_dump(int bytes_per_scalar = 2) const;

  private:
    int n_layers_;
    int cutoff_k_;
    VisibilityPolicy policy_;
    std::size_t entry_width_;
    std::vector<std::vector<KvEntry>> layers_;
};

}  // namespace kvband

#include "kvband/kv_store.hpp"

#include <stdexcept>

#include <nlohmann/json.hpp>

namespace kvband {

LayeredKvCache::LayeredKvCache(int n_layers, const VisibilityPolicy& policy, int n_kv_heads,
                               int d_head)
    : n_layers_(n_layers),
      cutoff_k_(policy.effective_cutoff(n_layers)),
      policy_(policy),
      entry_width_(static_cast<std::size_t>(n_kv_heads) * static_cast<std::size_t>(d_head)),
      layers_(static_cast<std::size_t>(n_layers > 0 ? n_layers : 0)) {
    if (n_layers < 1) throw std::invalid_argument("LayeredKvCache: n_layers must be >= 1");
    if (n_kv_heads < 1 || d_head < 1) {
        throw std::invalid_argument("LayeredKvCache: kv head shape must be positive");
    }
    if (cutoff_k_ < 1 || cutoff_k_ > n_layers) {
        throw std::invalid_argument("LayeredKvCache: cutoff K outside [1, n_layers]");
    }
}

bool LayeredKvCache::append(int layer, KvEntry entry) {
    if (layer < 1 || layer > n_layers_) {
        throw std::invalid_argument("LayeredKvCache::append: layer out of range");
    }
    if (entry.key.size() != entry_width_ || entry.value.size() != entry_width_) {
        throw std::invalid_argument("LayeredKvCache::append: key/value width mismatch");
    }
    std::vector<KvEntry>& band = layers_[static_cast<std::size_t>(layer - 1)];
    if (!band.empty() && entry.position <= band.back().position) {
        throw std::invalid_argument("LayeredKvCache::append: out-of-order position");
    }
    if (entry.token_class == TokenClass::PrefillBody && layer > cutoff_k_) {
        return false;
    }
    band.push_back(std::move(entry));
    return true;
}

std::span<const KvEntry> LayeredKvCache::read_band(int layer) const {
    if (layer < 1 || layer > n_layers_) {
        throw std::invalid_argument("LayeredKvCache::read_band: layer out of range");
    }
    const std::vector<KvEntry>& band = layers_[static_cast<std::size_t>(layer - 1)];
    return {band.data(), band.size()};
}

std::uint64_t LayeredKvCache::bytes_used(int n_kv_heads, int d_head, int bytes_per_scalar) const {
    const std::uint64_t per_entry = 2ull * static_cast<std::uint64_t>(n_kv_heads) *
                                    static_cast<std::uint64_t>(d_head) *
                                    static_cast<std::uint64_t>(bytes_per_scalar);
    return per_entry * static_cast<std::uint64_t>(total_entries());
}

std::size_t LayeredKvCache::total_entries() const {
    std::size_t total = 0;
    for (const auto& band : layers_) total += band.size();
    return total;
}

nlohmann::json LayeredKvCache::debug_dump(int bytes_per_scalar) const {
    nlohmann::json per_layer = nlohmann::json::array();
    const std::uint64_t per_entry = 2ull * static_cast<std::uint64_t>(entry_width_) *
                                    static_cast<std::uint64_t>(bytes_per_scalar);
    for (int l = 1; l <= n_layers_; ++l) {
        const std::size_t count = layers_[static_cast<std::size_t>(l - 1)].size();
        per_layer.push_back({{"layer", l},
                             {"entries", count},
                             {"bytes", per_entry * static_cast<std::uint64_t>(count)}});
    }
    return nlohmann::json{{"policy", policy_.to_string()},
                          {"n_layers", n_layers_},
                          {"cutoff_k", cutoff_k_},
                          {"total_entries", total_entries()},
                          {"total_bytes", per_entry * static_cast<std::uint64_t>(total_entries())},
                          {"layers", per_layer}};
}

}  // namespace kvband

#pragma once
// A small, deterministic decoder-only transformer: pre-norm residual blocks,
// grouped-query attention, rotary positions, SiLU-gated MLP. The engine
// drives it one layer at a time so visibility policies can truncate depth.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "kvband/matrix.hpp"

namespace kvband {

// Epsilon shared by every RMS norm in the model (blocks and final norm).
inline constexpr float kNormEps = 1e-5f;

struct ModelConfig {
    int n_layers{8};
    int d_model{64};
    int n_heads{4};
    int n_kv_heads{2};
    int d_head{16};
    int d_ff{256};
    int vocab_size{256};
    float theta_base{10000.0f};
    std::uint64_t init_seed{123};

    // Input-only begin-of-sequence token id; `logits` never scores it.
    int bos_id() const { return vocab_size; }

    // Throws std::invalid_argument when invariants fail: n_heads divisible by
    // n_kv_heads, d_model == n_heads * d_head, n_layers >= 2, positive dims.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    Matrix wq;      // d_model x (n_heads * d_head)
    Matrix wk;      // d_model x (n_kv_heads * d_head)
    Matrix wv;      // d_model x (n_kv_heads * d_head)
    Matrix wo;      // (n_heads * d_head) x d_model
    Matrix w_gate;  // d_model x d_ff
    Matrix w_up;    // d_model x d_ff
    Matrix w_down;  // d_ff x d_model
    std::vector<float> attn_norm_gain;  // d_model
    std::vector<float> mlp_norm_gain;   // d_model
};

struct ModelWeights {
    ModelConfig config;
    Matrix embedding;    // (vocab_size + 1) x d_model; row bos_id() is the BoS embedding
    Matrix unembedding;  // d_model x vocab_size
    std::vector<float> final_norm_gain;  // d_model
    std::vector<LayerWeights> layers;
};

// Deterministic pseudo-random initialization from config.init_seed.
// Projection/MLP/unembedding entries ~ N(0, 1/sqrt(d_model)); embeddings
// ~ N(0, 1); norm gains 1. Identical (config, seed) gives bit-identical
// weights. Throws std::invalid_argument on invalid config.
ModelWeights init_weights(const ModelConfig& config);

// One cached key/value entry viewed by attention at a single layer: the
// position is the token's ORIGINAL absolute index (rope was applied to the
// key at that position when it was produced).
struct KeyValueView {
    std::size_t position{0};
    std::span<const float> key;    // n_kv_heads * d_head
    std::span<const float> value;  // n_kv_heads * d_head
};

// Per-query visibility rows over [kv_view..., in-batch queries...]. Either
// materialized rows, or the causal fast path (query i sees every cached key
// plus in-batch queries 0..i) used by batch prefill.
struct AttentionMasks {
    bool causal{false};
    // Used when !causal: n_q rows, each of width kv_view.size() + n_q.
    std::vector<std::vector<std::uint8_t>> rows;
};

struct LayerForwardResult {
    Matrix h_out;   // n_q x d_model
    Matrix new_k;   // n_q x (n_kv_heads * d_head), rope applied at original positions
    Matrix new_v;   // n_q x (n_kv_heads * d_head)
    // Head-averaged post-softmax weights per query over the layer's key
    // ordering, captured only on request (empty otherwise). Each row sums
    // to 1 over its visible entries.
    std::vector<std::vector<float>> attn_rows;
};

// One pre-norm block: h + attn(rms(h)) followed by h + mlp(rms(h)).
// Grouped-query attention: query head i reads kv head i / (n_heads / n_kv).
// Throws std::invalid_argument on shape/mask-width mismatches; propagates the
// empty-visible-set error from masked_softmax_row (every query must at least
// see itself).
LayerForwardResult layer_forward(const ModelConfig& config, const LayerWeights& layer,
                                 const Matrix& h_in, std::span<const std::size_t> q_positions,
                                 std::span<const KeyValueView> kv_view,
                                 const AttentionMasks& masks, bool capture_attn);

// Pure unembedding product (length vocab_size). Linear by construction:
// logits(2h) == 2*logits(h). The engine applies the final RMS norm before
// calling this.
std::vector<float> logits(const ModelWeights& weights, std::span<const float> h_final);

// Weight checkpoint: little-endian flat 32-bit floats addressed by a JSON
// header (config + tensor offsets). save throws std::runtime_error on IO
// failure; load additionally throws std::invalid_argument on malformed files.
void save_checkpoint(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights load_checkpoint(const std::filesystem::path& path);

// Config <-> JSON, shared by checkpoints, traces, and CLI config files.
// config_from_json throws nlohmann::json::exception on missing/mistyped keys.
nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

}  // namespace kvband

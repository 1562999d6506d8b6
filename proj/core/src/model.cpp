#include "kvband/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace kvband {

void ModelConfig::validate() const {
    if (n_layers < 2) throw std::invalid_argument("ModelConfig: n_layers must be >= 2");
    if (d_model <= 0 || n_heads <= 0 || n_kv_heads <= 0 || d_head <= 0 || d_ff <= 0 ||
        vocab_size <= 0) {
        throw std::invalid_argument("ModelConfig: dimensions must be positive");
    }
    if (n_heads % n_kv_heads != 0) {
        throw std::invalid_argument("ModelConfig: n_heads must be divisible by n_kv_heads");
    }
    if (d_model != n_heads * d_head) {
        throw std::invalid_argument("ModelConfig: d_model must equal n_heads * d_head");
    }
    if (d_head % 2 != 0) {
        throw std::invalid_argument("ModelConfig: d_head must be even (rotary pairs)");
    }
    if (!(theta_base > 0.0f)) {
        throw std::invalid_argument("ModelConfig: theta_base must be positive");
    }
}

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, float stddev) {
    std::normal_distribution<float> dist(0.0f, stddev);
    Matrix m(rows, cols);
    for (float& v : m.data) v = dist(rng);
    return m;
}

}  // namespace

ModelWeights init_weights(const ModelConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.init_seed);
    const float proj_std = 1.0f / std::sqrt(static_cast<float>(config.d_model));
    const auto dm = static_cast<std::size_t>(config.d_model);
    const auto qdim = static_cast<std::size_t>(config.n_heads * config.d_head);
    const auto kvdim = static_cast<std::size_t>(config.n_kv_heads * config.d_head);
    const auto ff = static_cast<std::size_t>(config.d_ff);

    ModelWeights w;
    w.config = config;
    w.embedding = random_matrix(rng, static_cast<std::size_t>(config.vocab_size) + 1, dm, 1.0f);
    w.unembedding = random_matrix(rng, dm, static_cast<std::size_t>(config.vocab_size), proj_std);
    w.final_norm_gain.assign(dm, 1.0f);
    w.layers.reserve(static_cast<std::size_t>(config.n_layers));
    for (int l = 0; l < config.n_layers; ++l) {
        LayerWeights lw;
        lw.wq = random_matrix(rng, dm, qdim, proj_std);
        lw.wk = random_matrix(rng, dm, kvdim, proj_std);
        lw.wv = random_matrix(rng, dm, kvdim, proj_std);
        lw.wo = random_matrix(rng, qdim, dm, proj_std);
        lw.w_gate = random_matrix(rng, dm, ff, proj_std);
        lw.w_up = random_matrix(rng, dm, ff, proj_std);
        lw.w_down = random_matrix(rng, ff, dm, proj_std);
        lw.attn_norm_gain.assign(dm, 1.0f);
        lw.mlp_norm_gain.assign(dm, 1.0f);
        w.layers.push_back(std::move(lw));
    }
    return w;
}

namespace {

Matrix rms_norm_rows(const Matrix& h, std::span<const float> gain) {
    Matrix out(h.rows, h.cols);
    for (std::size_t r = 0; r < h.rows; ++r) {
        const std::vector<float> normed = rms_norm(h.row(r), gain, kNormEps);
        std::copy(normed.begin(), normed.end(), out.row(r).begin());
    }
    return out;
}

float dot(const float* a, const float* b, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace

LayerForwardResult layer_forward(const ModelConfig& config, const LayerWeights& layer,
                                 const Matrix& h_in, std::span<const std::size_t> q_positions,
                                 std::span<const KeyValueView> kv_view,
                                 const AttentionMasks& masks, bool capture_attn) {
    const std::size_t n_q = h_in.rows;
    const std::size_t dm = static_cast<std::size_t>(config.d_model);
    const std::size_t dh = static_cast<std::size_t>(config.d_head);
    const std::size_t n_heads = static_cast<std::size_t>(config.n_heads);
    const std::size_t n_kv = static_cast<std::size_t>(config.n_kv_heads);
    const std::size_t group = n_heads / n_kv;
    const std::size_t n_keys = kv_view.size() + n_q;

    if (h_in.cols != dm) throw std::invalid_argument("layer_forward: h_in width != d_model");
    if (q_positions.size() != n_q) {
        throw std::invalid_argument("layer_forward: one position per query row required");
    }
    for (const KeyValueView& kv : kv_view) {
        if (kv.key.size() != n_kv * dh || kv.value.size() != n_kv * dh) {
            throw std::invalid_argument("layer_forward: cached kv entry has wrong width");
        }
    }
    if (!masks.causal) {
        if (masks.rows.size() != n_q) {
            throw std::invalid_argument("layer_forward: one mask row per query required");
        }
        for (const auto& row : masks.rows) {
            if (row.size() != n_keys) {
                throw std::invalid_argument("layer_forward: mask width != |kv_view| + n_q");
            }
        }
    }

    // ---- Attention sublayer -------------------------------------------------
    const Matrix x = rms_norm_rows(h_in, layer.attn_norm_gain);
    Matrix q = matmul(x, layer.wq);  // n_q x (n_heads * d_head)
    Matrix k = matmul(x, layer.wk);  // n_q x (n_kv * d_head)
    Matrix v = matmul(x, layer.wv);  // n_q x (n_kv * d_head)

    // Rotary positions use original absolute indices.
    for (std::size_t r = 0; r < n_q; ++r) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            rope_apply(q.row(r).subspan(h * dh, dh), q_positions[r], config.theta_base);
        }
        for (std::size_t h = 0; h < n_kv; ++h) {
            rope_apply(k.row(r).subspan(h * dh, dh), q_positions[r], config.theta_base);
        }
    }

    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
    Matrix attn_out(n_q, n_heads * dh);
    LayerForwardResult result;
    if (capture_attn) result.attn_rows.assign(n_q, std::vector<float>(n_keys, 0.0f));

    std::vector<float> scores(n_keys);
    std::vector<std::uint8_t> visible(n_keys);
    std::vector<float> weights;
    for (std::size_t r = 0; r < n_q; ++r) {
        if (masks.causal) {
            // Every cached key plus in-batch queries up to and including r.
            std::fill(visible.begin(), visible.begin() + static_cast<std::ptrdiff_t>(kv_view.size() + r + 1), 1);
            std::fill(visible.begin() + static_cast<std::ptrdiff_t>(kv_view.size() + r + 1), visible.end(), 0);
        } else {
            std::copy(masks.rows[r].begin(), masks.rows[r].end(), visible.begin());
        }
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t kv_head = h / group;
            const float* q_vec = q.data.data() + r * q.cols + h * dh;
            for (std::size_t t = 0; t < n_keys; ++t) {
                if (!visible[t]) {
                    scores[t] = 0.0f;
                    continue;
                }
                const float* k_vec = t < kv_view.size()
                                         ? kv_view[t].key.data() + kv_head * dh
                                         : k.data.data() + (t - kv_view.size()) * k.cols + kv_head * dh;
                scores[t] = dot(q_vec, k_vec, dh) * inv_sqrt_dh;
            }
            weights = masked_softmax_row(scores, visible);

            float* out_vec = attn_out.data.data() + r * attn_out.cols + h * dh;
            for (std::size_t t = 0; t < n_keys; ++t) {
                const float w = weights[t];
                if (w == 0.0f) continue;
                const float* v_vec = t < kv_view.size()
                                         ? kv_view[t].value.data() + kv_head * dh
                                         : v.data.data() + (t - kv_view.size()) * v.cols + kv_head * dh;
                for (std::size_t d = 0; d < dh; ++d) out_vec[d] += w * v_vec[d];
            }
            if (capture_attn) {
                std::vector<float>& row = result.attn_rows[r];
                for (std::size_t t = 0; t < n_keys; ++t) row[t] += weights[t] / static_cast<float>(n_heads);
            }
        }
    }

    Matrix h_mid = matmul(attn_out, layer.wo);
    for (std::size_t i = 0; i < h_mid.data.size(); ++i) h_mid.data[i] += h_in.data[i];

    // ---- MLP sublayer (SiLU-gated) ------------------------------------------
    const Matrix x2 = rms_norm_rows(h_mid, layer.mlp_norm_gain);
    Matrix gate = matmul(x2, layer.w_gate);
    const Matrix up = matmul(x2, layer.w_up);
    for (std::size_t i = 0; i < gate.data.size(); ++i) gate.data[i] = silu(gate.data[i]) * up.data[i];
    Matrix mlp = matmul(gate, layer.w_down);
    for (std::size_t i = 0; i < mlp.data.size(); ++i) mlp.data[i] += h_mid.data[i];

    result.h_out = std::move(mlp);
    result.new_k = std::move(k);
    result.new_v = std::move(v);
    return result;
}

std::vector<float> logits(const ModelWeights& weights, std::span<const float> h_final) {
    const std::size_t dm = static_cast<std::size_t>(weights.config.d_model);
    if (h_final.size() != dm) {
        throw std::invalid_argument("logits: hidden state width != d_model");
    }
    const std::size_t vocab = static_cast<std::size_t>(weights.config.vocab_size);
    std::vector<float> out(vocab, 0.0f);
    for (std::size_t k = 0; k < dm; ++k) {
        const float hk = h_final[k];
        const float* row = weights.unembedding.data.data() + k * vocab;
        for (std::size_t j = 0; j < vocab; ++j) out[j] += hk * row[j];
    }
    return out;
}

// ---- Checkpoint IO ----------------------------------------------------------
//
// Layout: an 8-byte little-endian header length, the JSON header, then a flat
// little-endian f32 payload. The header records the config and per-tensor
// (rows, cols, offset) entries; offsets are element indices into the payload.

using nlohmann::json;

json config_to_json(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},     {"d_model", c.d_model},
                {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads},
                {"d_head", c.d_head},         {"d_ff", c.d_ff},
                {"vocab_size", c.vocab_size}, {"theta_base", c.theta_base},
                {"init_seed", c.init_seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_kv_heads = j.at("n_kv_heads").get<int>();
    c.d_head = j.at("d_head").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.theta_base = j.at("theta_base").get<float>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
}

namespace {

struct TensorRef {
    std::string name;
    const std::vector<float>* data;
    std::size_t rows, cols;
};

std::vector<TensorRef> enumerate_tensors(const ModelWeights& w) {
    std::vector<TensorRef> refs;
    const auto add_matrix = [&refs](std::string name, const Matrix& m) {
        refs.push_back({std::move(name), &m.data, m.rows, m.cols});
    };
    const auto add_vector = [&refs](std::string name, const std::vector<float>& v) {
        refs.push_back({std::move(name), &v, 1, v.size()});
    };
    add_matrix("embedding", w.embedding);
    add_matrix("unembedding", w.unembedding);
    add_vector("final_norm_gain", w.final_norm_gain);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const LayerWeights& lw = w.layers[l];
        const std::string prefix = "layer." + std::to_string(l) + ".";
        add_matrix(prefix + "wq", lw.wq);
        add_matrix(prefix + "wk", lw.wk);
        add_matrix(prefix + "wv", lw.wv);
        add_matrix(prefix + "wo", lw.wo);
        add_matrix(prefix + "w_gate", lw.w_gate);
        add_matrix(prefix + "w_up", lw.w_up);
        add_matrix(prefix + "w_down", lw.w_down);
        add_vector(prefix + "attn_norm_gain", lw.attn_norm_gain);
        add_vector(prefix + "mlp_norm_gain", lw.mlp_norm_gain);
    }
    return refs;
}

static_assert(sizeof(float) == 4, "checkpoint format assumes 32-bit floats");

}  // namespace

void save_checkpoint(const ModelWeights& weights, const std::filesystem::path& path) {
    const std::vector<TensorRef> refs = enumerate_tensors(weights);
    json header;
    header["magic"] = "kvband-ckpt";
    header["version"] = 1;
    header["byte_order"] = "little";
    header["config"] = config_to_json(weights.config);
    std::size_t offset = 0;
    json tensors = json::array();
    for (const TensorRef& ref : refs) {
        tensors.push_back({{"name", ref.name}, {"rows", ref.rows}, {"cols", ref.cols}, {"offset", offset}});
        offset += ref.data->size();
    }
    header["tensors"] = std::move(tensors);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    const std::string header_text = header.dump();
    const std::uint64_t header_len = header_text.size();
    std::uint8_t len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<std::uint8_t>((header_len >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(len_bytes), 8);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const TensorRef& ref : refs) {
        out.write(reinterpret_cast<const char*>(ref.data->data()),
                  static_cast<std::streamsize>(ref.data->size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

ModelWeights load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
    std::uint8_t len_bytes[8];
    in.read(reinterpret_cast<char*>(len_bytes), 8);
    if (!in) throw std::invalid_argument("load_checkpoint: truncated header length");
    std::uint64_t header_len = 0;
    for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(len_bytes[i]) << (8 * i);
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw std::invalid_argument("load_checkpoint: truncated header");

    json header;
    try {
        header = json::parse(header_text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("load_checkpoint: bad header JSON: ") + e.what());
    }
    if (header.value("magic", "") != "kvband-ckpt" || header.value("byte_order", "") != "little") {
        throw std::invalid_argument("load_checkpoint: not a kvband checkpoint");
    }

    ModelWeights w = init_weights(config_from_json(header.at("config")));
    std::vector<TensorRef> refs = enumerate_tensors(w);

    std::size_t loaded = 0;
    for (const json& t : header.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const auto rows = t.at("rows").get<std::size_t>();
        const auto cols = t.at("cols").get<std::size_t>();
        const auto offset = t.at("offset").get<std::uint64_t>();
        const auto it = std::find_if(refs.begin(), refs.end(),
                                     [&name](const TensorRef& r) { return r.name == name; });
        if (it == refs.end() || it->rows != rows || it->cols != cols) {
            throw std::invalid_argument("load_checkpoint: unexpected tensor " + name);
        }
        auto* dest = const_cast<std::vector<float>*>(it->data);
        in.seekg(static_cast<std::streamoff>(8 + header_len + offset * sizeof(float)));
        in.read(reinterpret_cast<char*>(dest->data()),
                static_cast<std::streamsize>(dest->size() * sizeof(float)));
        if (!in) throw std::invalid_argument("load_checkpoint: truncated payload at " + name);
        ++loaded;
    }
    if (loaded != refs.size()) {
        throw std::invalid_argument("load_checkpoint: header is missing tensors");
    }
    return w;
}

}  // namespace kvband

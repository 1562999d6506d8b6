#include "kvband/engine.hpp"

#include <algorithm>
#include <chrono>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

namespace kvband {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_between(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
}

Matrix embed_tokens(const ModelWeights& weights, std::span<const int> tokens) {
    const ModelConfig& c = weights.config;
    Matrix h(tokens.size(), static_cast<std::size_t>(c.d_model));
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int tok = tokens[i];
        if (tok < 0 || tok > c.bos_id()) {
            throw std::invalid_argument("engine: token id " + std::to_string(tok) +
                                        " outside the embedding table");
        }
        auto src = weights.embedding.row(static_cast<std::size_t>(tok));
        std::copy(src.begin(), src.end(), h.row(i).begin());
    }
    return h;
}

std::vector<KeyValueView> views_of_band(std::span<const KvEntry> band) {
    std::vector<KeyValueView> views;
    views.reserve(band.size());
    for (const KvEntry& e : band) views.push_back({e.position, e.key, e.value});
    return views;
}

std::vector<float> final_logits(const ModelWeights& weights, std::span<const float> h) {
    const std::vector<float> normed = rms_norm(h, weights.final_norm_gain, kNormEps);
    return logits(weights, normed);
}

void reserve_layer_captures(StepRecord& rec, const CaptureOptions& capture, int n_layers) {
    if (capture.attn_rows) {
        rec.attn_keys.resize(static_cast<std::size_t>(n_layers));
        rec.attn_weights.resize(static_cast<std::size_t>(n_layers));
    }
    if (capture.hidden_states) rec.hidden.resize(static_cast<std::size_t>(n_layers));
}

std::uint64_t realized_body_count(std::span<const int> prompt, const VisibilityPolicy& policy) {
    const std::uint64_t anchors = policy.anchor_bos ? 1u : 0u;
    return static_cast<std::uint64_t>(prompt.size()) - anchors - 1u;
}

}  // namespace

int argmax_token(std::span<const float> logit_row) {
    if (logit_row.empty()) throw std::invalid_argument("argmax_token: empty logits");
    std::size_t best = 0;
    for (std::size_t j = 1; j < logit_row.size(); ++j) {
        if (logit_row[j] > logit_row[best]) best = j;  // ties keep the lowest id
    }
    return static_cast<int>(best);
}

std::vector<ClassifiedToken> classify_prompt(const ModelWeights& weights,
                                             const VisibilityPolicy& policy,
                                             std::span<const int> prompt) {
    if (prompt.empty()) throw std::invalid_argument("engine: empty prompt");
    for (const int tok : prompt) {
        if (tok < 0 || tok > weights.config.bos_id()) {
            throw std::invalid_argument("engine: prompt token outside the embedding table");
        }
    }
    if (policy.anchor_bos) {
        if (prompt[0] != weights.config.bos_id()) {
            throw std::invalid_argument(
                "engine: policy anchors BoS but the prompt does not start with it");
        }
        if (prompt.size() < 2) {
            throw std::invalid_argument(
                "engine: anchored prompts need at least one token after BoS — the anchor cannot "
                "double as the generation trigger");
        }
    }
    std::vector<ClassifiedToken> classes(prompt.size());
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        TokenClass cls = TokenClass::PrefillBody;
        if (i == 0 && policy.anchor_bos) cls = TokenClass::BosAnchor;
        if (i + 1 == prompt.size()) cls = TokenClass::DecodeCurrent;  // generation trigger
        classes[i] = {i, cls};
    }
    return classes;
}

PrefillResult prefill(const ModelWeights& weights, const VisibilityPolicy& policy,
                      std::span<const int> prompt, const CaptureOptions& capture) {
    const auto t0 = Clock::now();
    const ModelConfig& cfg = weights.config;
    const std::vector<ClassifiedToken> classes = classify_prompt(weights, policy, prompt);
    const std::size_t p = prompt.size();
    const int n_layers = cfg.n_layers;
    const int cutoff = policy.effective_cutoff(n_layers);

    PrefillResult out{
        .cache = LayeredKvCache(n_layers, policy, cfg.n_kv_heads, cfg.d_head),
        .trigger_state = {},
        .history = classes,
        .trigger_record = {},
        .seconds = 0.0,
    };
    out.trigger_record.query_position = p - 1;
    reserve_layer_captures(out.trigger_record, capture, n_layers);

    std::vector<std::size_t> positions(p);
    for (std::size_t i = 0; i < p; ++i) positions[i] = i;

    auto cache_class = [](TokenClass cls) {
        // The trigger is cached as decode history for the steps that follow.
        return cls == TokenClass::DecodeCurrent ? TokenClass::DecodeHistory : cls;
    };
    auto record_trigger = [&](const LayerForwardResult& res, int layer, std::size_t row,
                              std::span<const std::size_t> key_positions, const Matrix& h_out) {
        const std::size_t li = static_cast<std::size_t>(layer - 1);
        if (capture.attn_rows) {
            out.trigger_record.attn_keys[li].assign(key_positions.begin(), key_positions.end());
            out.trigger_record.attn_weights[li] = res.attn_rows[row];
        }
        if (capture.hidden_states) {
            auto state = h_out.row(row);
            out.trigger_record.hidden[li].assign(state.begin(), state.end());
        }
    };

    // Lower band: every prompt token, full causal attention, KV cached.
    Matrix h = embed_tokens(weights, prompt);
    const std::size_t kv_width = static_cast<std::size_t>(cfg.n_kv_heads * cfg.d_head);
    for (int layer = 1; layer <= cutoff; ++layer) {
        AttentionMasks masks;
        masks.causal = true;
        LayerForwardResult res = layer_forward(cfg, weights.layers[layer - 1], h, positions, {},
                                               masks, capture.attn_rows);
        for (std::size_t i = 0; i < p; ++i) {
            auto k = res.new_k.row(i);
            auto v = res.new_v.row(i);
            out.cache.append(layer, KvEntry{positions[i], cache_class(classes[i].cls),
                                            {k.begin(), k.end()}, {v.begin(), v.end()}});
        }
        record_trigger(res, layer, p - 1, positions, res.h_out);
        h = std::move(res.h_out);
    }

    // Upper band: only full-depth tokens (anchor and trigger) continue; each
    // row's mask comes from the policy's visible set over the continuing batch.
    std::vector<std::size_t> cont;
    for (std::size_t i = 0; i < p; ++i) {
        if (classes[i].cls != TokenClass::PrefillBody) cont.push_back(i);
    }
    Matrix h_cont(cont.size(), static_cast<std::size_t>(cfg.d_model));
    std::vector<std::size_t> cont_positions(cont.size());
    for (std::size_t i = 0; i < cont.size(); ++i) {
        auto src = h.row(cont[i]);
        std::copy(src.begin(), src.end(), h_cont.row(i).begin());
        cont_positions[i] = positions[cont[i]];
    }
    for (int layer = cutoff + 1; layer <= n_layers; ++layer) {
        AttentionMasks masks;
        masks.rows.resize(cont.size());
        for (std::size_t i = 0; i < cont.size(); ++i) {
            const std::vector<std::size_t> visible =
                visible_set(policy, layer, n_layers, classes[cont[i]],
                            std::span<const ClassifiedToken>(classes.data(), cont[i]));
            masks.rows[i].assign(cont.size(), 0);
            for (std::size_t j = 0; j < cont.size(); ++j) {
                if (std::binary_search(visible.begin(), visible.end(), cont_positions[j])) {
                    masks.rows[i][j] = 1;
                }
            }
        }
        LayerForwardResult res = layer_forward(cfg, weights.layers[layer - 1], h_cont,
                                               cont_positions, {}, masks, capture.attn_rows);
        for (std::size_t i = 0; i < cont.size(); ++i) {
            auto k = res.new_k.row(i);
            auto v = res.new_v.row(i);
            out.cache.append(layer, KvEntry{cont_positions[i], cache_class(classes[cont[i]].cls),
                                            {k.begin(), k.end()}, {v.begin(), v.end()}});
        }
        record_trigger(res, layer, cont.size() - 1, cont_positions, res.h_out);
        h_cont = std::move(res.h_out);
    }

    const std::size_t trigger_row = (cutoff == n_layers) ? p - 1 : cont.size() - 1;
    const Matrix& final_h = (cutoff == n_layers) ? h : h_cont;
    auto state = final_h.row(trigger_row);
    out.trigger_state.assign(state.begin(), state.end());
    (void)kv_width;

    // The trigger joins decode history for subsequent steps.
    out.history[p - 1].cls = TokenClass::DecodeHistory;
    out.seconds = seconds_between(t0, Clock::now());
    return out;
}

StepResult decode_step(const ModelWeights& weights, const VisibilityPolicy& policy,
                       LayeredKvCache& cache, std::vector<ClassifiedToken>& history, int token,
                       std::size_t position, const CaptureOptions& capture) {
    const ModelConfig& cfg = weights.config;
    const int n_layers = cfg.n_layers;
    if (!history.empty() && position <= history.back().position) {
        throw std::invalid_argument("decode_step: position must advance past the history");
    }

    StepResult out;
    out.record.query_position = position;
    reserve_layer_captures(out.record, capture, n_layers);

    const int tok_arr[1] = {token};
    Matrix h = embed_tokens(weights, tok_arr);
    const std::size_t q_pos_arr[1] = {position};
    const ClassifiedToken query{position, TokenClass::DecodeCurrent};

    for (int layer = 1; layer <= n_layers; ++layer) {
        const std::span<const KvEntry> band = cache.read_band(layer);
        std::vector<std::size_t> engine_keys;
        engine_keys.reserve(band.size() + 1);
        for (const KvEntry& e : band) engine_keys.push_back(e.position);
        engine_keys.push_back(position);

        const DecodeMask mask =
            build_decode_mask(policy, layer, n_layers, history, query, engine_keys);
        AttentionMasks masks;
        masks.rows.push_back(mask.row);

        const std::vector<KeyValueView> views = views_of_band(band);
        LayerForwardResult res = layer_forward(cfg, weights.layers[layer - 1], h, q_pos_arr, views,
                                               masks, capture.attn_rows);
        auto k = res.new_k.row(0);
        auto v = res.new_v.row(0);
        const bool stored = cache.append(
            layer, KvEntry{position, TokenClass::DecodeHistory, {k.begin(), k.end()},
                           {v.begin(), v.end()}});
        if (!stored) {
            throw std::logic_error("decode_step: cache rejected a decode entry");
        }

        const std::size_t li = static_cast<std::size_t>(layer - 1);
        if (capture.attn_rows) {
            out.record.attn_keys[li] = mask.key_positions;
            out.record.attn_weights[li] = res.attn_rows[0];
        }
        if (capture.hidden_states) {
            auto state = res.h_out.row(0);
            out.record.hidden[li].assign(state.begin(), state.end());
        }
        h = std::move(res.h_out);
    }

    out.step_logits = final_logits(weights, h.row(0));
    out.next_token = argmax_token(out.step_logits);
    out.record.token = out.next_token;
    history.push_back({position, TokenClass::DecodeHistory});
    return out;
}

GenerationTrace generate(const ModelWeights& weights, const VisibilityPolicy& policy,
                         std::span<const int> prompt, int max_new, const CaptureOptions& capture) {
    if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
    const auto t0 = Clock::now();

    GenerationTrace trace;
    trace.config = weights.config;
    trace.policy = policy;
    trace.prompt_tokens.assign(prompt.begin(), prompt.end());

    PrefillResult pre = prefill(weights, policy, prompt, capture);
    std::vector<float> first_logits = final_logits(weights, pre.trigger_state);
    int next = argmax_token(first_logits);
    const auto t1 = Clock::now();
    trace.prefill_seconds = seconds_between(t0, t1);

    pre.trigger_record.step = 1;
    pre.trigger_record.token = next;
    trace.generated_tokens.push_back(next);
    trace.steps.push_back(std::move(pre.trigger_record));
    trace.step_logits.push_back(std::move(first_logits));

    const std::size_t p = prompt.size();
    for (int step = 2; step <= max_new; ++step) {
        const std::size_t position = p + static_cast<std::size_t>(step) - 2;
        StepResult sr = decode_step(weights, policy, pre.cache, pre.history, next, position,
                                    capture);
        next = sr.next_token;
        sr.record.step = step;
        trace.generated_tokens.push_back(next);
        trace.steps.push_back(std::move(sr.record));
        trace.step_logits.push_back(std::move(sr.step_logits));
    }
    trace.decode_seconds = seconds_between(t1, Clock::now());

    trace.realized_a = policy.anchor_bos ? 1u : 0u;
    trace.realized_n = realized_body_count(prompt, policy);
    trace.realized_t = static_cast<std::uint64_t>(max_new);  // trigger + forwarded tokens
    return trace;
}

GenerationTrace reference_generate(const ModelWeights& weights, const VisibilityPolicy& policy,
                                   std::span<const int> prompt, int max_new,
                                   const CaptureOptions& capture) {
    if (max_new < 1) throw std::invalid_argument("reference_generate: max_new must be >= 1");
    const auto t0 = Clock::now();
    const ModelConfig& cfg = weights.config;
    const int n_layers = cfg.n_layers;
    std::vector<ClassifiedToken> classes = classify_prompt(weights, policy, prompt);
    const std::size_t p = prompt.size();

    GenerationTrace trace;
    trace.config = cfg;
    trace.policy = policy;
    trace.prompt_tokens.assign(prompt.begin(), prompt.end());

    // Full materialization: every token's KV at every layer; the policy acts
    // only through per-row masks.
    std::vector<std::vector<std::vector<float>>> keys(static_cast<std::size_t>(n_layers));
    std::vector<std::vector<std::vector<float>>> values(static_cast<std::size_t>(n_layers));
    std::vector<std::size_t> kv_positions;

    std::vector<std::size_t> positions(p);
    for (std::size_t i = 0; i < p; ++i) positions[i] = i;

    StepRecord trigger_record;
    trigger_record.step = 1;
    trigger_record.query_position = p - 1;
    reserve_layer_captures(trigger_record, capture, n_layers);

    Matrix h = embed_tokens(weights, prompt);
    for (int layer = 1; layer <= n_layers; ++layer) {
        const std::size_t li = static_cast<std::size_t>(layer - 1);
        AttentionMasks masks;
        masks.rows.resize(p);
        for (std::size_t i = 0; i < p; ++i) {
            const std::vector<std::size_t> visible =
                visible_set(policy, layer, n_layers, classes[i],
                            std::span<const ClassifiedToken>(classes.data(), i));
            masks.rows[i].assign(p, 0);
            for (const std::size_t pos : visible) masks.rows[i][pos] = 1;
        }
        LayerForwardResult res = layer_forward(cfg, weights.layers[li], h, positions, {}, masks,
                                               capture.attn_rows);
        for (std::size_t i = 0; i < p; ++i) {
            auto k = res.new_k.row(i);
            auto v = res.new_v.row(i);
            keys[li].emplace_back(k.begin(), k.end());
            values[li].emplace_back(v.begin(), v.end());
        }
        if (capture.attn_rows) {
            trigger_record.attn_keys[li] = positions;
            trigger_record.attn_weights[li] = res.attn_rows[p - 1];
        }
        if (capture.hidden_states) {
            auto state = res.h_out.row(p - 1);
            trigger_record.hidden[li].assign(state.begin(), state.end());
        }
        h = std::move(res.h_out);
    }
    kv_positions = positions;

    std::vector<float> first_logits = final_logits(weights, h.row(p - 1));
    int next = argmax_token(first_logits);
    const auto t1 = Clock::now();
    trace.prefill_seconds = seconds_between(t0, t1);

    trigger_record.token = next;
    trace.generated_tokens.push_back(next);
    trace.steps.push_back(std::move(trigger_record));
    trace.step_logits.push_back(std::move(first_logits));

    classes[p - 1].cls = TokenClass::DecodeHistory;

    for (int step = 2; step <= max_new; ++step) {
        const std::size_t position = p + static_cast<std::size_t>(step) - 2;
        const ClassifiedToken query{position, TokenClass::DecodeCurrent};
        const int tok_arr[1] = {next};
        Matrix hd = embed_tokens(weights, tok_arr);
        const std::size_t q_pos_arr[1] = {position};

        StepRecord rec;
        rec.step = step;
        rec.query_position = position;
        reserve_layer_captures(rec, capture, n_layers);

        for (int layer = 1; layer <= n_layers; ++layer) {
            const std::size_t li = static_cast<std::size_t>(layer - 1);
            std::vector<KeyValueView> views;
            views.reserve(kv_positions.size());
            for (std::size_t t = 0; t < kv_positions.size(); ++t) {
                views.push_back({kv_positions[t], keys[li][t], values[li][t]});
            }
            const std::vector<std::size_t> visible =
                visible_set(policy, layer, n_layers, query, classes);
            AttentionMasks masks;
            masks.rows.emplace_back(kv_positions.size() + 1, 0);
            for (std::size_t t = 0; t < kv_positions.size(); ++t) {
                if (std::binary_search(visible.begin(), visible.end(), kv_positions[t])) {
                    masks.rows[0][t] = 1;
                }
            }
            masks.rows[0][kv_positions.size()] = 1;  // self, always visible

            LayerForwardResult res = layer_forward(cfg, weights.layers[li], hd, q_pos_arr, views,
                                                   masks, capture.attn_rows);
            auto k = res.new_k.row(0);
            auto v = res.new_v.row(0);
            keys[li].emplace_back(k.begin(), k.end());
            values[li].emplace_back(v.begin(), v.end());
            if (capture.attn_rows) {
                rec.attn_keys[li] = kv_positions;
                rec.attn_keys[li].push_back(position);
                rec.attn_weights[li] = res.attn_rows[0];
            }
            if (capture.hidden_states) {
                auto state = res.h_out.row(0);
                rec.hidden[li].assign(state.begin(), state.end());
            }
            hd = std::move(res.h_out);
        }
        kv_positions.push_back(position);
        classes.push_back({position, TokenClass::DecodeHistory});

        std::vector<float> step_logits = final_logits(weights, hd.row(0));
        next = argmax_token(step_logits);
        rec.token = next;
        trace.generated_tokens.push_back(next);
        trace.steps.push_back(std::move(rec));
        trace.step_logits.push_back(std::move(step_logits));
    }
    trace.decode_seconds = seconds_between(t1, Clock::now());

    trace.realized_a = policy.anchor_bos ? 1u : 0u;
    trace.realized_n = realized_body_count(prompt, policy);
    trace.realized_t = static_cast<std::uint64_t>(max_new);
    return trace;
}

std::vector<int> synthetic_prompt(const ModelConfig& config, const VisibilityPolicy& policy,
                                  std::size_t len, std::uint64_t seed) {
    if (len == 0) throw std::invalid_argument("synthetic_prompt: len must be >= 1");
    if (policy.anchor_bos && len < 2) {
        throw std::invalid_argument("synthetic_prompt: anchored prompts need len >= 2");
    }
    std::mt19937_64 rng(seed ^ static_cast<std::uint64_t>(len));
    std::uniform_int_distribution<int> dist(0, config.vocab_size - 1);
    std::vector<int> prompt(len);
    std::size_t start = 0;
    if (policy.anchor_bos) {
        prompt[0] = config.bos_id();
        start = 1;
    }
    for (std::size_t i = start; i < len; ++i) prompt[i] = dist(rng);
    return prompt;
}

// ---- Trace IO -----------------------------------------------------------------
//
// JSON Lines: one meta record, then one record per decode step. Captured
// per-layer payloads are emitted only when present so large sweeps stay small.

namespace {

using nlohmann::json;

json step_to_json(const StepRecord& rec, const std::vector<float>& step_logits) {
    json j{{"type", "step"},
           {"step", rec.step},
           {"token", rec.token},
           {"position", rec.query_position},
           {"logits", step_logits}};
    const std::size_t n_layers =
        std::max(rec.attn_keys.size(), std::max(rec.attn_weights.size(), rec.hidden.size()));
    if (n_layers > 0) {
        json layers = json::array();
        for (std::size_t li = 0; li < n_layers; ++li) {
            json layer{{"layer", li + 1}};
            if (li < rec.attn_keys.size() && !rec.attn_keys.empty()) {
                layer["keys"] = rec.attn_keys[li];
                layer["weights"] = rec.attn_weights[li];
            }
            if (li < rec.hidden.size() && !rec.hidden.empty()) {
                layer["hidden"] = rec.hidden[li];
            }
            layers.push_back(std::move(layer));
        }
        j["layers"] = std::move(layers);
    }
    return j;
}

}  // namespace

void write_trace_jsonl(const GenerationTrace& trace, std::ostream& out) {
    json meta{{"type", "meta"},
              {"version", 1},
              {"policy", trace.policy.to_string()},
              {"config", config_to_json(trace.config)},
              {"prompt", trace.prompt_tokens},
              {"generated", trace.generated_tokens},
              {"prefill_seconds", trace.prefill_seconds},
              {"decode_seconds", trace.decode_seconds},
              {"realized", json{{"n", trace.realized_n}, {"a", trace.realized_a},
                                {"t", trace.realized_t}}}};
    out << meta.dump() << '\n';
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
        out << step_to_json(trace.steps[i], trace.step_logits[i]).dump() << '\n';
    }
    if (!out) throw std::runtime_error("write_trace_jsonl: stream write failed");
}

GenerationTrace read_trace_jsonl(std::istream& in) {
    GenerationTrace trace;
    bool have_meta = false;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        const std::string type = j.at("type").get<std::string>();
        if (type == "meta") {
            if (have_meta) throw std::invalid_argument("read_trace_jsonl: duplicate meta record");
            have_meta = true;
            trace.policy = VisibilityPolicy::parse(j.at("policy").get<std::string>());
            trace.config = config_from_json(j.at("config"));
            trace.prompt_tokens = j.at("prompt").get<std::vector<int>>();
            trace.generated_tokens = j.at("generated").get<std::vector<int>>();
            trace.prefill_seconds = j.at("prefill_seconds").get<double>();
            trace.decode_seconds = j.at("decode_seconds").get<double>();
            const json& realized = j.at("realized");
            trace.realized_n = realized.at("n").get<std::uint64_t>();
            trace.realized_a = realized.at("a").get<std::uint64_t>();
            trace.realized_t = realized.at("t").get<std::uint64_t>();
            continue;
        }
        if (type != "step") {
            throw std::invalid_argument("read_trace_jsonl: unknown record type '" + type + "'");
        }
        if (!have_meta) {
            throw std::invalid_argument("read_trace_jsonl: step record before meta");
        }
        StepRecord rec;
        rec.step = j.at("step").get<int>();
        rec.token = j.at("token").get<int>();
        rec.query_position = j.at("position").get<std::size_t>();
        if (j.contains("layers")) {
            const json& layers = j.at("layers");
            const std::size_t n_layers = layers.size();
            bool any_attn = false;
            bool any_hidden = false;
            for (const json& layer : layers) {
                if (layer.contains("keys")) any_attn = true;
                if (layer.contains("hidden")) any_hidden = true;
            }
            if (any_attn) {
                rec.attn_keys.resize(n_layers);
                rec.attn_weights.resize(n_layers);
            }
            if (any_hidden) rec.hidden.resize(n_layers);
            for (const json& layer : layers) {
                const std::size_t li = layer.at("layer").get<std::size_t>() - 1;
                if (li >= n_layers) {
                    throw std::invalid_argument("read_trace_jsonl: layer index out of range");
                }
                if (layer.contains("keys")) {
                    rec.attn_keys[li] = layer.at("keys").get<std::vector<std::size_t>>();
                    rec.attn_weights[li] = layer.at("weights").get<std::vector<float>>();
                }
                if (layer.contains("hidden")) {
                    rec.hidden[li] = layer.at("hidden").get<std::vector<float>>();
                }
            }
        }
        trace.step_logits.push_back(j.at("logits").get<std::vector<float>>());
        trace.steps.push_back(std::move(rec));
    }
    if (!have_meta) throw std::invalid_argument("read_trace_jsonl: missing meta record");
    return trace;
}

}  // namespace kvband

#include "kvband/verify.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>

#include "kvband/cost_model.hpp"
#include "kvband/engine.hpp"
#include "kvband/kv_store.hpp"

namespace kvband {

namespace {

// Visible-set construction transcribed directly from the per-band policy
// table. Deliberately independent of visible_set() so the two can disagree.
std::vector<std::size_t> table_visible(const VisibilityPolicy& policy, int layer, int n_layers,
                                       const ClassifiedToken& query,
                                       std::span<const ClassifiedToken> history) {
    const int cutoff = policy.effective_cutoff(n_layers);
    std::vector<std::size_t> out;
    if (layer <= cutoff || query.cls == TokenClass::PrefillBody) {
        for (const ClassifiedToken& h : history) out.push_back(h.position);
        out.push_back(query.position);
        return out;
    }
    if (query.cls == TokenClass::BosAnchor) {
        out.push_back(query.position);
        return out;
    }
    for (const ClassifiedToken& h : history) {
        const bool anchor = h.cls == TokenClass::BosAnchor;
        const bool decode = h.cls == TokenClass::DecodeHistory;
        if (anchor || (decode && policy.kind == PolicyKind::Speed)) out.push_back(h.position);
    }
    out.push_back(query.position);
    return out;
}

// Materialized key ordering transcribed from the caching rule: prefill-body
// entries exist only through the cutoff; everything else is full-depth.
std::vector<std::size_t> table_keys(const VisibilityPolicy& policy, int layer, int n_layers,
                                    std::span<const ClassifiedToken> history,
                                    const ClassifiedToken& query) {
    const int cutoff = policy.effective_cutoff(n_layers);
    std::vector<std::size_t> keys;
    for (const ClassifiedToken& h : history) {
        if (h.cls == TokenClass::PrefillBody && layer > cutoff) continue;
        keys.push_back(h.position);
    }
    keys.push_back(query.position);
    return keys;
}

std::vector<ClassifiedToken> prompt_classes(const VisibilityPolicy& policy, std::size_t len) {
    std::vector<ClassifiedToken> classes(len);
    for (std::size_t i = 0; i < len; ++i) {
        TokenClass cls = TokenClass::PrefillBody;
        if (i == 0 && policy.anchor_bos) cls = TokenClass::BosAnchor;
        if (i + 1 == len) cls = TokenClass::DecodeCurrent;
        classes[i] = {i, cls};
    }
    return classes;
}

}  // namespace

EquivalenceOutcome run_equivalence_trial(const ModelConfig& config, const VisibilityPolicy& policy,
                                         std::size_t prompt_len, int max_new,
                                         std::uint64_t prompt_seed) {
    EquivalenceOutcome out;
    out.config = config;
    out.policy = policy;
    out.prompt_len = prompt_len;
    out.max_new = max_new;
    out.prompt_seed = prompt_seed;

    const ModelWeights weights = init_weights(config);
    const std::vector<int> prompt = synthetic_prompt(config, policy, prompt_len, prompt_seed);
    const GenerationTrace engine = generate(weights, policy, prompt, max_new);
    const GenerationTrace reference = reference_generate(weights, policy, prompt, max_new);

    out.tokens_match = engine.generated_tokens == reference.generated_tokens;
    const std::size_t n_steps = std::min(engine.step_logits.size(), reference.step_logits.size());
    for (std::size_t s = 0; s < n_steps; ++s) {
        const std::vector<float>& a = engine.step_logits[s];
        const std::vector<float>& b = reference.step_logits[s];
        for (std::size_t j = 0; j < a.size(); ++j) {
            out.max_logit_gap = std::max(out.max_logit_gap, std::abs(a[j] - b[j]));
        }
        // Past the first divergent token the sequences are different inputs;
        // their logit gap carries no signal.
        if (engine.generated_tokens[s] != reference.generated_tokens[s]) break;
    }
    return out;
}

BatterySummary run_equivalence_battery(int n_trials, std::uint64_t seed, float tolerance,
                                       std::ostream* log) {
    if (n_trials < 1) throw std::invalid_argument("run_equivalence_battery: n_trials must be >= 1");
    BatterySummary summary;
    std::mt19937_64 rng(seed);
    auto draw = [&rng](std::uint64_t lo, std::uint64_t hi) {  // inclusive bounds
        return lo + rng() % (hi - lo + 1);
    };

    for (int t = 0; t < n_trials; ++t) {
        const int n_layers = static_cast<int>(draw(4, 8));
        VisibilityPolicy policy;
        switch (draw(0, 3)) {
            case 0: policy = {PolicyKind::Speed, false, 0, false}; break;
            case 1: policy = {PolicyKind::Speed, true, 0, false}; break;
            case 2: policy = {PolicyKind::SelfOnly, false, 0, false}; break;
            default: policy = {PolicyKind::SelfOnly, true, 0, false}; break;
        }
        policy.cutoff_k = static_cast<int>(draw(1, static_cast<std::uint64_t>(n_layers)));
        policy.post_hoc = draw(0, 1) == 1;

        ModelConfig config;
        config.n_layers = n_layers;
        config.n_heads = draw(0, 1) == 0 ? 2 : 4;
        config.n_kv_heads = 1 << draw(0, static_cast<std::uint64_t>(config.n_heads == 2 ? 1 : 2));
        config.d_head = draw(0, 1) == 0 ? 8 : 16;
        config.d_model = config.n_heads * config.d_head;
        config.d_ff = 3 * config.d_model;
        config.vocab_size = draw(0, 1) == 0 ? 61 : 256;
        config.init_seed = rng();

        const std::size_t min_len = policy.anchor_bos ? 2 : 1;
        const std::size_t prompt_len = static_cast<std::size_t>(draw(min_len, 96));
        const int max_new = static_cast<int>(draw(1, 16));
        const std::uint64_t prompt_seed = rng();

        const EquivalenceOutcome outcome =
            run_equivalence_trial(config, policy, prompt_len, max_new, prompt_seed);
        ++summary.trials;
        summary.max_logit_gap = std::max(summary.max_logit_gap, outcome.max_logit_gap);
        if (!outcome.passed(tolerance)) {
            ++summary.failures;
            if (summary.failed.size() < 8) summary.failed.push_back(outcome);
            if (log) {
                *log << "equivalence FAIL: policy=" << policy.to_string()
                     << " layers=" << n_layers << " prompt_len=" << prompt_len
                     << " max_new=" << max_new << " seed=" << prompt_seed
                     << " tokens_match=" << (outcome.tokens_match ? "yes" : "no")
                     << " max_logit_gap=" << outcome.max_logit_gap << '\n';
            }
        }
    }
    if (log) {
        *log << "equivalence battery: " << summary.trials - summary.failures << '/'
             << summary.trials << " trials passed, max logit gap " << summary.max_logit_gap
             << " (tolerance " << tolerance << ")\n";
    }
    return summary;
}

MaskEnumerationSummary run_mask_enumeration(std::ostream* log) {
    MaskEnumerationSummary summary;
    auto check = [&](bool ok, const VisibilityPolicy& policy, int n_layers, int layer,
                     const char* what) {
        ++summary.cases;
        if (!ok) {
            ++summary.failures;
            if (log) {
                *log << "mask FAIL: " << what << " policy=" << policy.to_string()
                     << " n_layers=" << n_layers << " layer=" << layer << '\n';
            }
        }
    };

    auto check_decode_masks = [&](const VisibilityPolicy& policy, int n_layers,
                                  std::span<const ClassifiedToken> history,
                                  const ClassifiedToken& query) {
        for (int layer = 1; layer <= n_layers; ++layer) {
            const DecodeMask mask = build_decode_mask(policy, layer, n_layers, history, query);
            const std::vector<std::size_t> keys =
                table_keys(policy, layer, n_layers, history, query);
            const std::vector<std::size_t> visible =
                table_visible(policy, layer, n_layers, query, history);
            check(mask.key_positions == keys, policy, n_layers, layer, "decode key ordering");
            bool row_ok = mask.row.size() == keys.size();
            if (row_ok) {
                for (std::size_t i = 0; i < keys.size(); ++i) {
                    const bool want = std::binary_search(visible.begin(), visible.end(), keys[i]);
                    if ((mask.row[i] != 0) != want) {
                        row_ok = false;
                        break;
                    }
                }
                // Every visible position must be materialized: nothing the
                // table grants may be missing from the key list.
                for (const std::size_t pos : visible) {
                    if (!std::binary_search(keys.begin(), keys.end(), pos)) row_ok = false;
                }
            }
            check(row_ok, policy, n_layers, layer, "decode visibility row");
        }
    };

    for (int n_layers = 2; n_layers <= 6; ++n_layers) {
        std::vector<VisibilityPolicy> policies;
        for (const bool post_hoc : {false, true}) {
            policies.push_back({PolicyKind::FullAttn, false, 0, post_hoc});
            for (int cutoff = 1; cutoff <= n_layers; ++cutoff) {
                for (const PolicyKind kind : {PolicyKind::Speed, PolicyKind::SelfOnly}) {
                    for (const bool anchored : {false, true}) {
                        policies.push_back({kind, anchored, cutoff, post_hoc});
                    }
                }
            }
        }

        for (const VisibilityPolicy& policy : policies) {
            const std::size_t min_len = policy.anchor_bos ? 2 : 1;
            for (std::size_t p = min_len; p <= 5; ++p) {
                std::vector<ClassifiedToken> classes = prompt_classes(policy, p);

                // The trigger queries while the rest of the prompt is history.
                check_decode_masks(policy, n_layers,
                                   std::span<const ClassifiedToken>(classes.data(), p - 1),
                                   classes[p - 1]);

                // Subsequent decode steps.
                std::vector<ClassifiedToken> history = classes;
                history[p - 1].cls = TokenClass::DecodeHistory;
                for (std::size_t d = 0; d <= 4; ++d) {
                    const ClassifiedToken query{p + d, TokenClass::DecodeCurrent};
                    check_decode_masks(policy, n_layers, history, query);
                    history.push_back({p + d, TokenClass::DecodeHistory});
                }
            }

            // Teacher-forcing masks against band-set construction.
            const std::size_t min_prompt = policy.anchor_bos ? 1 : 1;
            for (std::size_t p = min_prompt; p <= 4; ++p) {
                std::vector<TokenClass> prompt(p, TokenClass::PrefillBody);
                if (policy.anchor_bos) prompt[0] = TokenClass::BosAnchor;
                for (std::size_t targets = 1; targets <= 4; ++targets) {
                    const TrainingMask tm =
                        build_training_mask(policy, n_layers, prompt, targets);
                    const std::size_t n = p + targets;

                    MaskMatrix lower(n);
                    for (std::size_t q = 0; q < n; ++q) {
                        for (std::size_t k = 0; k <= q; ++k) lower.at(q, k) = 1;
                    }
                    MaskMatrix upper(n);
                    const bool banded = policy.effective_cutoff(n_layers) < n_layers;
                    if (!banded) {
                        upper = lower;  // vacuous band reported as causal
                    } else {
                        for (std::size_t q = 0; q < n; ++q) {
                            if (q < p) {  // prompt rows stay causal
                                for (std::size_t k = 0; k <= q; ++k) upper.at(q, k) = 1;
                                continue;
                            }
                            if (policy.anchor_bos) upper.at(q, 0) = 1;
                            if (policy.kind == PolicyKind::Speed) {
                                for (std::size_t k = p; k < q; ++k) upper.at(q, k) = 1;
                            }
                            upper.at(q, q) = 1;
                        }
                    }
                    check(tm.lower == lower, policy, n_layers, 0, "training lower band");
                    check(tm.upper == upper, policy, n_layers, 0, "training upper band");
                }
            }
        }
    }
    if (log) {
        *log << "mask enumeration: " << summary.cases - summary.failures << '/' << summary.cases
             << " cases passed\n";
    }
    return summary;
}

CountingAudit run_counting_audit(const ModelConfig& config, const VisibilityPolicy& policy,
                                 std::size_t prompt_len, int max_new, std::uint64_t prompt_seed) {
    if (max_new < 1) throw std::invalid_argument("run_counting_audit: max_new must be >= 1");
    const ModelWeights weights = init_weights(config);
    const std::vector<int> prompt = synthetic_prompt(config, policy, prompt_len, prompt_seed);

    PrefillResult pre = prefill(weights, policy, prompt, {});
    const std::vector<float> normed =
        rms_norm(pre.trigger_state, weights.final_norm_gain, kNormEps);
    int next = argmax_token(logits(weights, normed));
    for (int step = 2; step <= max_new; ++step) {
        const std::size_t position = prompt.size() + static_cast<std::size_t>(step) - 2;
        next = decode_step(weights, policy, pre.cache, pre.history, next, position).next_token;
    }

    CountingAudit audit;
    audit.realized_a = policy.anchor_bos ? 1u : 0u;
    audit.realized_n = static_cast<std::uint64_t>(prompt.size()) - audit.realized_a - 1u;
    audit.realized_t = static_cast<std::uint64_t>(max_new);
    audit.bytes_used = pre.cache.bytes_used(config.n_kv_heads, config.d_head, 2);

    CostInputs c;
    c.L = config.n_layers;
    c.K = policy.effective_cutoff(config.n_layers);
    c.N = audit.realized_n;
    c.a = audit.realized_a;
    c.T = audit.realized_t;
    c.n_kv = config.n_kv_heads;
    c.d_head = config.d_head;
    c.b = 2;
    audit.bytes_predicted = bytes_speed(c);

    const int cutoff = policy.effective_cutoff(config.n_layers);
    for (int layer = cutoff + 1; layer <= config.n_layers; ++layer) {
        for (const KvEntry& entry : pre.cache.read_band(layer)) {
            if (entry.token_class == TokenClass::PrefillBody) ++audit.body_entries_above_cutoff;
        }
    }
    return audit;
}

}  // namespace kvband

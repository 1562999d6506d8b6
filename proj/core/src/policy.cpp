#include "kvband/policy.hpp"

#include <algorithm>
#include <charconv>
#include <stdexcept>

namespace kvband {

namespace {

bool is_decode_phase(TokenClass c) {
    return c == TokenClass::DecodeHistory || c == TokenClass::DecodeCurrent;
}

void validate_query_and_history(const VisibilityPolicy& policy, int layer, int n_layers,
                                const ClassifiedToken& query,
                                std::span<const ClassifiedToken> history) {
    if (n_layers < 1 || layer < 1 || layer > n_layers) {
        throw std::invalid_argument("visible_set: layer out of range");
    }
    if (policy.kind != PolicyKind::FullAttn &&
        (policy.cutoff_k < 1 || policy.cutoff_k > n_layers)) {
        throw std::invalid_argument("visible_set: cutoff K out of range");
    }
    std::size_t prev = 0;
    bool first = true;
    for (const ClassifiedToken& t : history) {
        if (!first && t.position <= prev) {
            throw std::invalid_argument("visible_set: history positions must be strictly increasing");
        }
        if (t.position >= query.position) {
            throw std::invalid_argument("visible_set: history must precede the query (causality)");
        }
        if (t.cls == TokenClass::BosAnchor && t.position != 0) {
            throw std::invalid_argument("visible_set: BosAnchor must sit at position 0");
        }
        if (t.cls == TokenClass::DecodeCurrent) {
            throw std::invalid_argument("visible_set: history may not contain DecodeCurrent");
        }
        prev = t.position;
        first = false;
    }
    if (query.cls == TokenClass::BosAnchor && query.position != 0) {
        throw std::invalid_argument("visible_set: BosAnchor query must sit at position 0");
    }
}

}  // namespace

std::vector<std::size_t> visible_set(const VisibilityPolicy& policy, int layer, int n_layers,
                                     const ClassifiedToken& query,
                                     std::span<const ClassifiedToken> history) {
    validate_query_and_history(policy, layer, n_layers, query, history);

    const bool lower_band = layer <= policy.effective_cutoff(n_layers);
    std::vector<std::size_t> out;
    out.reserve(history.size() + 1);

    if (lower_band || query.cls == TokenClass::PrefillBody) {
        // Lower band: identical full causal set across all policies. Upper-band
        // prefill-body rows (reference-oracle only; the engine never computes
        // them) also attend causally — their outputs are never read.
        for (const ClassifiedToken& t : history) out.push_back(t.position);
        out.push_back(query.position);
        return out;
    }

    // Upper band (l > K).
    switch (query.cls) {
        case TokenClass::BosAnchor:
            // The anchor attends to itself during prefill at upper layers.
            out.push_back(query.position);
            return out;
        case TokenClass::DecodeHistory:
        case TokenClass::DecodeCurrent: {
            const bool keep_decode_history = policy.kind != PolicyKind::SelfOnly;
            for (const ClassifiedToken& t : history) {
                if (t.cls == TokenClass::BosAnchor && policy.anchor_bos) {
                    out.push_back(t.position);
                } else if (is_decode_phase(t.cls) && keep_decode_history) {
                    out.push_back(t.position);
                }
            }
            out.push_back(query.position);
            return out;
        }
        case TokenClass::PrefillBody:
            break;  // handled above
    }
    return out;  // unreachable
}

namespace {

// Positions of `history` entries materialized by the cache at `layer`:
// PrefillBody only in the lower band, every other class at all layers.
std::vector<std::size_t> materialized_positions(const VisibilityPolicy& policy, int layer,
                                                int n_layers,
                                                std::span<const ClassifiedToken> history) {
    const bool lower_band = layer <= policy.effective_cutoff(n_layers);
    std::vector<std::size_t> keys;
    keys.reserve(history.size());
    for (const ClassifiedToken& t : history) {
        if (lower_band || t.cls != TokenClass::PrefillBody) keys.push_back(t.position);
    }
    return keys;
}

}  // namespace

DecodeMask build_decode_mask(const VisibilityPolicy& policy, int layer, int n_layers,
                             std::span<const ClassifiedToken> history,
                             const ClassifiedToken& query) {
    DecodeMask mask;
    mask.key_positions = materialized_positions(policy, layer, n_layers, history);
    mask.key_positions.push_back(query.position);

    const std::vector<std::size_t> visible = visible_set(policy, layer, n_layers, query, history);
    mask.row.resize(mask.key_positions.size(), 0);
    for (std::size_t i = 0; i < mask.key_positions.size(); ++i) {
        mask.row[i] = std::binary_search(visible.begin(), visible.end(), mask.key_positions[i]) ? 1 : 0;
    }
    return mask;
}

DecodeMask build_decode_mask(const VisibilityPolicy& policy, int layer, int n_layers,
                             std::span<const ClassifiedToken> history,
                             const ClassifiedToken& query,
                             std::span<const std::size_t> engine_key_positions) {
    DecodeMask mask = build_decode_mask(policy, layer, n_layers, history, query);
    if (!std::ranges::equal(mask.key_positions, engine_key_positions)) {
        throw std::invalid_argument(
            "build_decode_mask: engine key ordering does not match the policy's materialization");
    }
    return mask;
}

TrainingMask build_training_mask(const VisibilityPolicy& policy, int n_layers,
                                 std::span<const TokenClass> prompt_classes,
                                 std::size_t target_len) {
    if (target_len < 1) {
        throw std::invalid_argument("build_training_mask: target_len must be >= 1");
    }
    for (std::size_t i = 0; i < prompt_classes.size(); ++i) {
        const TokenClass c = prompt_classes[i];
        if (c != TokenClass::BosAnchor && c != TokenClass::PrefillBody) {
            throw std::invalid_argument("build_training_mask: prompt classes must be prefill-side");
        }
        if (c == TokenClass::BosAnchor && i != 0) {
            throw std::invalid_argument("build_training_mask: BosAnchor must sit at position 0");
        }
    }
    const bool anchored = !prompt_classes.empty() && prompt_classes[0] == TokenClass::BosAnchor;
    if (anchored != policy.anchor_bos && policy.kind != PolicyKind::FullAttn) {
        throw std::invalid_argument("build_training_mask: anchor flag and prompt classes disagree");
    }

    const std::size_t p = prompt_classes.size();
    const std::size_t total = p + target_len;
    TrainingMask out{MaskMatrix(total), MaskMatrix(total)};

    // Lower band: fully causal for every row.
    for (std::size_t q = 0; q < total; ++q) {
        for (std::size_t k = 0; k <= q; ++k) out.lower.at(q, k) = 1;
    }

    const int k_eff = policy.effective_cutoff(n_layers);
    if (k_eff >= n_layers) {
        // No layer lies above the cutoff; the vacuous upper band is returned
        // equal to the causal lower mask.
        out.upper = out.lower;
        return out;
    }

    // Upper band. Prompt rows stay causal; target rows follow the decode rule.
    for (std::size_t q = 0; q < p; ++q) {
        for (std::size_t k = 0; k <= q; ++k) out.upper.at(q, k) = 1;
    }
    for (std::size_t q = p; q < total; ++q) {
        if (anchored) out.upper.at(q, 0) = 1;
        if (policy.kind != PolicyKind::SelfOnly) {
            for (std::size_t k = p; k < q; ++k) out.upper.at(q, k) = 1;  // Y_<t
        }
        out.upper.at(q, q) = 1;  // {y_t}
    }
    return out;
}

namespace {

int parse_cutoff(std::string_view text) {
    int value = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr != text.data() + text.size() || value < 1) {
        throw std::invalid_argument("policy parse: bad cutoff '" + std::string(text) + "'");
    }
    return value;
}

}  // namespace

VisibilityPolicy VisibilityPolicy::parse(std::string_view text) {
    VisibilityPolicy policy;
    std::string_view rest = text;

    const auto take_suffix = [&rest](std::string_view suffix) {
        if (rest.size() >= suffix.size() && rest.substr(rest.size() - suffix.size()) == suffix) {
            rest.remove_suffix(suffix.size());
            return true;
        }
        return false;
    };
    policy.post_hoc = take_suffix(":posthoc");

    if (rest == "full") {
        policy.kind = PolicyKind::FullAttn;
        return policy;
    }

    const std::size_t colon = rest.find(':');
    if (colon == std::string_view::npos) {
        throw std::invalid_argument("policy parse: unrecognized policy '" + std::string(text) + "'");
    }
    std::string_view head = rest.substr(0, colon);
    std::string_view tail = rest.substr(colon + 1);

    if (head == "speed") {
        policy.kind = PolicyKind::Speed;
    } else if (head == "speed+bos") {
        policy.kind = PolicyKind::Speed;
        policy.anchor_bos = true;
    } else if (head == "selfonly") {
        policy.kind = PolicyKind::SelfOnly;
    } else if (head == "selfonly+bos") {
        policy.kind = PolicyKind::SelfOnly;
        policy.anchor_bos = true;
    } else {
        throw std::invalid_argument("policy parse: unrecognized policy '" + std::string(text) + "'");
    }
    policy.cutoff_k = parse_cutoff(tail);
    return policy;
}

std::string VisibilityPolicy::to_string() const {
    std::string out;
    switch (kind) {
        case PolicyKind::FullAttn:
            out = "full";
            break;
        case PolicyKind::Speed:
            out = anchor_bos ? "speed+bos" : "speed";
            break;
        case PolicyKind::SelfOnly:
            out = anchor_bos ? "selfonly+bos" : "selfonly";
            break;
    }
    if (kind != PolicyKind::FullAttn) out += ":" + std::to_string(cutoff_k);
    if (post_hoc) out += ":posthoc";
    return out;
}

}  // namespace kvband

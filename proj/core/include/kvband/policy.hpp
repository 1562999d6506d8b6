#pragma once
// Declarative source of truth for which cached token states each query may
// attend to, per layer band and policy.
//
// Token classes:
//   BosAnchor     — the begin-of-sequence token when the policy anchors it
//                   (full-depth prefill-side reference, position 0 only).
//   PrefillBody   — non-anchor prompt tokens (under anchor-free policies this
//                   includes a leading BoS token, if the prompt has one).
//   DecodeHistory — previously generated decode-phase tokens (the generation
//                   trigger — the final prompt position — is decode-phase).
//   DecodeCurrent — the query token of the current step.
//
// Layer bands ("lower" band is inclusive: l <= K):
//   l <= K : all policies see the full causal set.
//   l >  K : FullAttn never reaches here (K == L semantically);
//            Speed sees decode history + self (+ BoS when anchored);
//            SelfOnly sees self only (+ BoS when anchored).

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kvband {

enum class TokenClass : std::uint8_t { BosAnchor, PrefillBody, DecodeHistory, DecodeCurrent };

enum class PolicyKind : std::uint8_t { FullAttn, Speed, SelfOnly };

struct VisibilityPolicy {
    PolicyKind kind{PolicyKind::FullAttn};
    bool anchor_bos{false};
    // Cutoff layer K, 1-based and inclusive for the lower band. Ignored for
    // FullAttn, which behaves as K == n_layers at any depth.
    int cutoff_k{0};
    // Apply this visibility at inference to weights trained with full
    // visibility. A pure engine flag: masks are identical to the non-post-hoc
    // variant; it exists as a configuration surface.
    bool post_hoc{false};

    int effective_cutoff(int n_layers) const {
        return kind == PolicyKind::FullAttn ? n_layers : cutoff_k;
    }

    // Compact string format: "full", "speed:K", "speed+bos:K", "selfonly:K",
    // "selfonly+bos:K", each optionally suffixed ":posthoc".
    // Throws std::invalid_argument on anything else.
    static VisibilityPolicy parse(std::string_view text);
    std::string to_string() const;

    bool operator==(const VisibilityPolicy&) const = default;
};

struct ClassifiedToken {
    std::size_t position{0};
    TokenClass cls{TokenClass::PrefillBody};
};

// The set of token positions (sorted ascending) that `query` may attend to at
// `layer` (1-based) out of `history` plus itself. Total over all class/layer
// combinations; throws std::invalid_argument only on structural misuse: layer
// out of [1, n_layers], history positions not strictly increasing or not
// before the query, or a BosAnchor that is not the unique position-0 token.
std::vector<std::size_t> visible_set(const VisibilityPolicy& policy, int layer, int n_layers,
                                     const ClassifiedToken& query,
                                     std::span<const ClassifiedToken> history);

// A decode-step mask row over the engine's key ordering at one layer: the
// cache's materialized entries for `history` in ascending position order,
// followed by the in-batch query. row[i] == 1 iff key_positions[i] is in
// visible_set(...).
struct DecodeMask {
    std::vector<std::size_t> key_positions;
    std::vector<std::uint8_t> row;
};
DecodeMask build_decode_mask(const VisibilityPolicy& policy, int layer, int n_layers,
                             std::span<const ClassifiedToken> history,
                             const ClassifiedToken& query);
// Same, but validates that the engine's actual key ordering matches the
// derived materialization; throws std::invalid_argument on mismatch.
DecodeMask build_decode_mask(const VisibilityPolicy& policy, int layer, int n_layers,
                             std::span<const ClassifiedToken> history,
                             const ClassifiedToken& query,
                             std::span<const std::size_t> engine_key_positions);

// Square boolean mask, row-major: at(q, k) == 1 means query row q may attend
// to key column k.
struct MaskMatrix {
    std::size_t n{0};
    std::vector<std::uint8_t> data;

    explicit MaskMatrix(std::size_t size = 0) : n(size), data(size * size, 0) {}
    std::uint8_t& at(std::size_t q, std::size_t k) { return data[q * n + k]; }
    std::uint8_t at(std::size_t q, std::size_t k) const { return data[q * n + k]; }
    bool operator==(const MaskMatrix&) const = default;
};

// Teacher-forcing visibility over (prompt + targets) x (prompt + targets) for
// the two layer bands. Prompt rows are causal in both bands (upper-band
// non-anchor prompt rows are never read by any target row because their key
// columns are masked out there). Target row y_t:
//   lower band: P ∪ A ∪ Y_<t ∪ {y_t}        (full causal)
//   upper band: A ∪ Y_<t ∪ {y_t}            (Speed)
//               A ∪ {y_t}                    (SelfOnly)
//               full causal                  (FullAttn)
// where A = {position 0} when the policy anchors BoS, else ∅.
// When K == n_layers the upper band is empty (never consulted); the returned
// upper mask equals the causal lower mask by convention.
struct TrainingMask {
    MaskMatrix lower;  // layers 1..K
    MaskMatrix upper;  // layers K+1..L
};
TrainingMask build_training_mask(const VisibilityPolicy& policy, int n_layers,
                                 std::span<const TokenClass> prompt_classes,
                                 std::size_t target_len);

}  // namespace kvband

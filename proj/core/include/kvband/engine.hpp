#pragma once
// Orchestrates Prefill and Decode under a visibility policy, including the
// masked full-depth reference oracle used for equivalence testing.
//
// Phase rules (engine path):
//   * Non-anchor prompt tokens are computed and cached through layers 1..K
//     only; their layer-K hidden states are then discarded.
//   * The BoS anchor (when the policy anchors it) is computed through all L
//     layers; at l > K it attends only to itself during prefill.
//   * The generation trigger — the final prompt position, whose final-layer
//     state produces the first generated token's logits — is classified as a
//     decode-phase token and traverses all L layers under decode visibility.
//   * Every decode step appends KV at all L layers.
// Greedy decoding only; argmax ties break toward the lowest token id.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "kvband/kv_store.hpp"
#include "kvband/model.hpp"
#include "kvband/policy.hpp"

namespace kvband {

struct CaptureOptions {
    bool attn_rows{false};      // per-step per-layer head-averaged rows
    bool hidden_states{false};  // per-step per-layer d_model states
};

// Captures for the decode-phase token that produced one generated token.
// Step 1 is the generation trigger (forwarded during prefill); step i > 1 is
// the forward of generated token i-1.
struct StepRecord {
    int step{0};                // 1-based
    int token{0};               // the generated token this step produced
    std::size_t query_position{0};
    // Indexed by layer-1 when captured; empty otherwise.
    std::vector<std::vector<std::size_t>> attn_keys;  // key positions per layer
    std::vector<std::vector<float>> attn_weights;     // head-averaged, same shape
    std::vector<std::vector<float>> hidden;           // post-block states per layer
};

struct GenerationTrace {
    ModelConfig config;
    VisibilityPolicy policy;
    std::vector<int> prompt_tokens;
    std::vector<int> generated_tokens;
    std::vector<StepRecord> steps;
    // Per-step final logits (always captured; small at toy scale). steps and
    // step_logits share indexing.
    std::vector<std::vector<float>> step_logits;
    double prefill_seconds{0.0};  // prefill through the first token's logits (TTFT)
    double decode_seconds{0.0};   // wall time of the remaining decode steps
    // Realized cost-model symbols for the run.
    std::uint64_t realized_n{0};
    std::uint64_t realized_a{0};
    std::uint64_t realized_t{0};
};

struct PrefillResult {
    LayeredKvCache cache;
    std::vector<float> trigger_state;  // final-layer residual state (pre final-norm)
    std::vector<ClassifiedToken> history;  // prompt tokens, classified
    StepRecord trigger_record;             // captures for the trigger row
    double seconds{0.0};
};

// Runs prefill over the prompt. Errors (std::invalid_argument): empty prompt;
// anchoring enabled but prompt[0] is not the BoS id; anchored prompt shorter
// than 2 (BoS cannot double as the trigger); token ids outside the embedding
// table.
PrefillResult prefill(const ModelWeights& weights, const VisibilityPolicy& policy,
                      std::span<const int> prompt, const CaptureOptions& capture = {});

struct StepResult {
    int next_token{0};
    std::vector<float> step_logits;
    StepRecord record;
};

// Forwards `token` at `position` through all layers against the cache,
// appends its KV everywhere, and returns the greedy next token. `history`
// must describe every cached token (the engine's classified list) and is
// extended with the forwarded token. Throws std::invalid_argument on
// cache/policy mismatches (validated against the policy's materialization).
StepResult decode_step(const ModelWeights& weights, const VisibilityPolicy& policy,
                       LayeredKvCache& cache, std::vector<ClassifiedToken>& history, int token,
                       std::size_t position, const CaptureOptions& capture = {});

// Greedy generation: prefill, first token from the trigger state, then
// max_new - 1 decode steps. Deterministic; no EOS semantics.
// Throws std::invalid_argument if max_new < 1 (plus prefill's errors).
GenerationTrace generate(const ModelWeights& weights, const VisibilityPolicy& policy,
                         std::span<const int> prompt, int max_new,
                         const CaptureOptions& capture = {});

// Oracle twin of generate: every token's KV is kept at every layer (all
// tokens computed full-depth) and the policy is enforced purely through row
// masks over the full key list. Prefill-body tokens at l > K attend causally,
// but their KV is masked out of every other query's row, so they cannot
// contribute to any other token's residual stream. Same interface and trace
// format as generate.
GenerationTrace reference_generate(const ModelWeights& weights, const VisibilityPolicy& policy,
                                   std::span<const int> prompt, int max_new,
                                   const CaptureOptions& capture = {});

// Greedy argmax with ties broken toward the lowest token id.
int argmax_token(std::span<const float> logit_row);

// Classifies a prompt for a policy: position 0 is BosAnchor when the policy
// anchors BoS, the final position is the decode-phase trigger, everything
// else is PrefillBody. Validation as in prefill.
std::vector<ClassifiedToken> classify_prompt(const ModelWeights& weights,
                                             const VisibilityPolicy& policy,
                                             std::span<const int> prompt);

// Deterministic synthetic prompt of `len` byte tokens from `seed`; when the
// policy anchors BoS the first token is the BoS id followed by len-1 bytes.
std::vector<int> synthetic_prompt(const ModelConfig& config, const VisibilityPolicy& policy,
                                  std::size_t len, std::uint64_t seed);

// JSONL trace: one meta record, then one record per decode step with the
// token id and any captured per-layer payloads (attention keys/weights,
// bucket-ready masses are derivable; hidden states and their norms).
void write_trace_jsonl(const GenerationTrace& trace, std::ostream& out);
GenerationTrace read_trace_jsonl(std::istream& in);

}  // namespace kvband

#pragma once
// Verification batteries:
//   * equivalence — the truncated engine path against the masked full-depth
//     reference: identical greedy tokens and per-step logits within tolerance;
//   * mask enumeration — decode and training masks against visible sets
//     constructed directly from the per-band policy table;
//   * counting audit — realized cache bytes against the closed-form
//     prediction, plus the no-body-above-cutoff materialization invariant.

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "kvband/model.hpp"
#include "kvband/policy.hpp"

namespace kvband {

struct EquivalenceOutcome {
    ModelConfig config;
    VisibilityPolicy policy;
    std::size_t prompt_len{0};
    int max_new{0};
    std::uint64_t prompt_seed{0};
    bool tokens_match{false};
    float max_logit_gap{0.0f};

    bool passed(float tolerance) const { return tokens_match && max_logit_gap <= tolerance; }
};

// One engine-vs-reference run over a synthetic prompt. The logit gap is
// measured through the step of first token divergence, if any.
EquivalenceOutcome run_equivalence_trial(const ModelConfig& config, const VisibilityPolicy& policy,
                                         std::size_t prompt_len, int max_new,
                                         std::uint64_t prompt_seed);

struct BatterySummary {
    int trials{0};
    int failures{0};
    float max_logit_gap{0.0f};
    std::vector<EquivalenceOutcome> failed;  // capped at 8 entries

    bool passed() const { return trials > 0 && failures == 0; }
};

// Randomized battery over small models (4..8 layers, every banded policy
// kind, all cutoffs, prompts up to 96 tokens). Deterministic for a given
// seed. Writes one line per failure plus a summary when `log` is given.
BatterySummary run_equivalence_battery(int n_trials, std::uint64_t seed, float tolerance,
                                       std::ostream* log = nullptr);

struct MaskEnumerationSummary {
    long long cases{0};
    long long failures{0};

    bool passed() const { return cases > 0 && failures == 0; }
};

// Exhaustive sweep: models of 2..6 layers, every cutoff, every policy kind,
// prompts up to 5 tokens, up to 4 decode steps, plus teacher-forcing masks
// for targets up to 4 tokens. Every mask is compared against a visible set
// built independently from the band table. Writes failures to `log`.
MaskEnumerationSummary run_mask_enumeration(std::ostream* log = nullptr);

struct CountingAudit {
    std::uint64_t bytes_used{0};
    std::uint64_t bytes_predicted{0};
    std::uint64_t realized_n{0};
    std::uint64_t realized_a{0};
    std::uint64_t realized_t{0};
    std::size_t body_entries_above_cutoff{0};

    bool passed() const { return bytes_used == bytes_predicted && body_entries_above_cutoff == 0; }
};

// Runs generation step by step and audits the cache it leaves behind.
CountingAudit run_counting_audit(const ModelConfig& config, const VisibilityPolicy& policy,
                                 std::size_t prompt_len, int max_new, std::uint64_t prompt_seed);

}  // namespace kvband

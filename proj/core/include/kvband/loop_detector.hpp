#pragma once
// Degenerate repetition detection over the tail of a generated sequence.
//
// Window: the final 256 tokens. A candidate is a unit of 1..20 tokens cycling
// up to the end of the window, allowing at most 8 trailing tokens after it.
// The periodic span may begin mid-unit; the cut unit's tokens count toward
// loop_tokens but not repeats. A sequence loops when some candidate covers at
// least 12 tokens with at least 3 full repeats. Among qualifying candidates
// the report keeps the longest covered span, breaking ties toward the
// shortest unit, then the fewest trailing tokens.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kvband {

inline constexpr std::size_t kLoopWindow = 256;
inline constexpr std::size_t kLoopMaxUnit = 20;
inline constexpr std::size_t kLoopMaxTrailing = 8;
inline constexpr std::size_t kLoopMinTokens = 12;
inline constexpr std::size_t kLoopMinRepeats = 3;

struct LoopReport {
    bool has_loop{false};
    std::size_t unit_len{0};     // 0 unless has_loop
    std::size_t repeats{0};      // full units inside the covered span
    std::size_t loop_tokens{0};  // covered span, including a partial unit
    std::size_t trailing{0};     // tokens after the span, inside the window
};

LoopReport detect_loop(std::span<const int> tokens);
LoopReport detect_loop(std::span<const std::string> tokens);

// Word tokens: maximal runs of ASCII alphanumerics; everything else
// separates. Deterministic and locale-independent.
std::vector<std::string> tokenize_words(std::string_view text);

// tokenize_words + detect_loop.
LoopReport detect_loop_text(std::string_view text);

struct LoopStats {
    std::size_t sequences{0};
    std::size_t loops{0};

    // 100 * loops / sequences; 0 when empty.
    double loop_rate_pct() const {
        return sequences == 0 ? 0.0 : 100.0 * static_cast<double>(loops) /
                                          static_cast<double>(sequences);
    }

    void add(const LoopReport& report) {
        ++sequences;
        if (report.has_loop) ++loops;
    }
};

}  // namespace kvband

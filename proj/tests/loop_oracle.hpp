#pragma once
// Brute-force reference for the loop detector, written independently of the
// library implementation: candidate coverage comes from a forward scan that
// records the last periodicity break, while the library walks backward. Kept
// in tests/ so both the unit test and the acceptance gate compare against it.

#include <kvband/loop_detector.hpp>

#include <algorithm>
#include <cstddef>
#include <span>

namespace kvband_test {

inline kvband::LoopReport oracle_detect_loop(std::span<const int> tokens) {
    const std::size_t window = std::min<std::size_t>(tokens.size(), kvband::kLoopWindow);
    const std::span<const int> w = tokens.subspan(tokens.size() - window);

    kvband::LoopReport best{};
    const std::size_t max_trailing = std::min<std::size_t>(kvband::kLoopMaxTrailing, window);
    for (std::size_t trailing = 0; trailing <= max_trailing; ++trailing) {
        const std::size_t end = window - trailing;
        const std::size_t max_unit = std::min<std::size_t>(kvband::kLoopMaxUnit, end);
        for (std::size_t unit = 1; unit <= max_unit; ++unit) {
            // Longest unit-periodic suffix of w[0..end): scan forward and
            // remember the last position that breaks w[pos] == w[pos + unit].
            bool any_break = false;
            std::size_t last_break = 0;
            for (std::size_t pos = 0; pos + unit < end; ++pos) {
                if (w[pos] != w[pos + unit]) {
                    any_break = true;
                    last_break = pos;
                }
            }
            const std::size_t covered = any_break ? end - (last_break + 1) : end;
            const std::size_t repeats = covered / unit;
            if (covered < kvband::kLoopMinTokens || repeats < kvband::kLoopMinRepeats) continue;
            const bool better =
                !best.has_loop || covered > best.loop_tokens ||
                (covered == best.loop_tokens &&
                 (unit < best.unit_len ||
                  (unit == best.unit_len && trailing < best.trailing)));
            if (better) {
                best.has_loop = true;
                best.unit_len = unit;
                best.repeats = repeats;
                best.loop_tokens = covered;
                best.trailing = trailing;
            }
        }
    }
    return best;
}

inline bool reports_equal(const kvband::LoopReport& a, const kvband::LoopReport& b) {
    return a.has_loop == b.has_loop && a.unit_len == b.unit_len && a.repeats == b.repeats &&
           a.loop_tokens == b.loop_tokens && a.trailing == b.trailing;
}

}  // namespace kvband_test

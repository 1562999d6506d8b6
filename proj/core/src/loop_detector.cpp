#include "kvband/loop_detector.hpp"

#include <algorithm>

namespace kvband {

namespace {

template <typename T>
LoopReport detect_loop_impl(std::span<const T> tokens) {
    const std::size_t window = std::min(tokens.size(), kLoopWindow);
    const std::span<const T> w = tokens.subspan(tokens.size() - window, window);

    LoopReport best;
    for (std::size_t trailing = 0; trailing <= std::min(kLoopMaxTrailing, window);
         ++trailing) {
        const std::size_t end = window - trailing;  // candidate span ends here
        for (std::size_t unit = 1; unit <= std::min(kLoopMaxUnit, end); ++unit) {
            // Longest suffix of w[0..end) with period `unit`: extend matches
            // of w[j] == w[j + unit] leftward from the final unit.
            std::size_t matched = 0;
            for (std::size_t j = end - unit; j-- > 0;) {
                if (w[j] == w[j + unit]) {
                    ++matched;
                } else {
                    break;
                }
            }
            const std::size_t covered = std::min(matched + unit, end);
            const std::size_t repeats = covered / unit;
            if (covered < kLoopMinTokens || repeats < kLoopMinRepeats) continue;
            const bool better = covered > best.loop_tokens ||
                                (covered == best.loop_tokens && unit < best.unit_len) ||
                                (covered == best.loop_tokens && unit == best.unit_len &&
                                 trailing < best.trailing);
            if (!best.has_loop || better) {
                best = LoopReport{true, unit, repeats, covered, trailing};
            }
        }
    }
    return best;
}

}  // namespace

LoopReport detect_loop(std::span<const int> tokens) { return detect_loop_impl(tokens); }

LoopReport detect_loop(std::span<const std::string> tokens) { return detect_loop_impl(tokens); }

std::vector<std::string> tokenize_words(std::string_view text) {
    auto is_word = [](char c) {
        return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
    };
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && !is_word(text[i])) ++i;
        const std::size_t start = i;
        while (i < text.size() && is_word(text[i])) ++i;
        if (i > start) words.emplace_back(text.substr(start, i - start));
    }
    return words;
}

LoopReport detect_loop_text(std::string_view text) {
    const std::vector<std::string> words = tokenize_words(text);
    return detect_loop(std::span<const std::string>(words));
}

}  // namespace kvband

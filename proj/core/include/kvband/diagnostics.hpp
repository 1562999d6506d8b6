#pragma once
// Per-layer attention and trajectory diagnostics over captured generation
// traces: bucketed attention mass, conditional prompt entropy, trajectory
// straightening, and the peak-layer summary they roll up into.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "kvband/engine.hpp"

namespace kvband {

// Where a key position's attention mass is attributed. The query itself is
// always Other ("self" mass is not part of any content bucket).
enum class Bucket : int { User, Bos, Decode, Other };

// Position -> bucket map for one trace: position 0 is Bos when anchored,
// other prompt positions are User, generated positions are Decode.
struct SpanMap {
    std::size_t prompt_len{0};
    bool anchored{false};

    Bucket classify(std::size_t position) const {
        if (anchored && position == 0) return Bucket::Bos;
        if (position < prompt_len) return Bucket::User;
        return Bucket::Decode;
    }
};

SpanMap span_map_for(const GenerationTrace& trace);

struct BucketMasses {
    double user{0.0};
    double bos{0.0};
    double decode{0.0};
    double other{0.0};

    double total() const { return user + bos + decode + other; }
};

// Distributes one attention row's mass over buckets; the self key (position
// == query_position) goes to Other. Throws std::invalid_argument when keys
// and weights disagree in length, a weight is negative, or the row's mass is
// not 1 within 1e-5.
BucketMasses attention_mass_by_bucket(std::span<const std::size_t> keys,
                                      std::span<const float> weights, const SpanMap& map,
                                      std::size_t query_position);

// Shannon entropy (nats) of the attention distribution renormalized over the
// User-bucket keys, self excluded. Absent when that bucket holds exactly zero
// mass. Same validation as attention_mass_by_bucket.
std::optional<double> conditional_prompt_entropy(std::span<const std::size_t> keys,
                                                 std::span<const float> weights,
                                                 const SpanMap& map, std::size_t query_position);

// Angle-based curvature of a residual-stream trajectory h_1..h_L: for
// 1-based layer l in [2, L-1], the angle (radians) between h_{l+1} - h_l and
// h_l - h_{l-1}. Entries outside that range, or adjacent to a zero-norm
// delta, are absent. Throws std::invalid_argument on ragged state widths.
std::vector<std::optional<double>> layer_curvatures(
    std::span<const std::vector<float>> states);

struct LayerDiagnostics {
    BucketMasses masses;                      // averaged over steps
    std::optional<double> prompt_entropy;     // mean H over steps where defined
    std::optional<double> curvature;          // mean angle over steps where defined
    std::optional<double> straightening;      // curvature at first measurable layer
                                              // minus this layer's curvature
};

struct PeakSummary {
    // 1-based layers; a bucket peak is absent when the bucket carries zero
    // mass at every layer.
    std::optional<int> prompt_peak_layer;
    std::optional<int> bos_peak_layer;
    std::optional<int> decode_peak_layer;
    std::optional<int> entropy_min_layer;
    std::optional<int> straightening_peak_layer;
    // entropy_min_layer - straightening_peak_layer, when both exist.
    std::optional<int> entropy_minus_straightening;
    // Pearson correlation between straightening and negated entropy over
    // layers where both are defined; absent for fewer than two such layers or
    // a constant series.
    std::optional<double> straightening_entropy_corr;
};

// Ties break toward the lowest layer index. Throws std::invalid_argument on
// fewer than two layers.
PeakSummary peak_summary(std::span<const LayerDiagnostics> layers);

struct TraceDiagnostics {
    std::vector<LayerDiagnostics> layers;  // one per model layer
    PeakSummary peaks;
};

// Aggregates a trace captured with attention rows and hidden states; masses
// and entropies are averaged across decode steps, curvature is averaged per
// layer before straightening is formed. Throws std::invalid_argument when the
// trace was recorded without the needed captures.
TraceDiagnostics summarize_trace(const GenerationTrace& trace, const SpanMap& map);

}  // namespace kvband

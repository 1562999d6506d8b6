#include "kvband/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kvband {

namespace {

constexpr double kRowMassTolerance = 1e-5;

void validate_row(std::span<const std::size_t> keys, std::span<const float> weights) {
    if (keys.size() != weights.size()) {
        throw std::invalid_argument("attention row: keys and weights lengths differ");
    }
    double total = 0.0;
    for (const float w : weights) {
        if (w < 0.0f) throw std::invalid_argument("attention row: negative weight");
        total += w;
    }
    if (std::abs(total - 1.0) > kRowMassTolerance) {
        throw std::invalid_argument("attention row: mass does not sum to 1");
    }
}

std::optional<int> argmax_layer(std::span<const LayerDiagnostics> layers, auto&& value) {
    std::optional<int> best;
    double best_value = 0.0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::optional<double> v = value(layers[i]);
        if (!v) continue;
        if (!best || *v > best_value) {  // strict: ties keep the lowest layer
            best = static_cast<int>(i + 1);
            best_value = *v;
        }
    }
    return best;
}

}  // namespace

SpanMap span_map_for(const GenerationTrace& trace) {
    return SpanMap{trace.prompt_tokens.size(), trace.policy.anchor_bos};
}

BucketMasses attention_mass_by_bucket(std::span<const std::size_t> keys,
                                      std::span<const float> weights, const SpanMap& map,
                                      std::size_t query_position) {
    validate_row(keys, weights);
    BucketMasses m;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        const double w = weights[i];
        const Bucket bucket =
            keys[i] == query_position ? Bucket::Other : map.classify(keys[i]);
        switch (bucket) {
            case Bucket::User: m.user += w; break;
            case Bucket::Bos: m.bos += w; break;
            case Bucket::Decode: m.decode += w; break;
            case Bucket::Other: m.other += w; break;
        }
    }
    return m;
}

std::optional<double> conditional_prompt_entropy(std::span<const std::size_t> keys,
                                                 std::span<const float> weights,
                                                 const SpanMap& map,
                                                 std::size_t query_position) {
    validate_row(keys, weights);
    double user_mass = 0.0;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        if (keys[i] != query_position && map.classify(keys[i]) == Bucket::User) {
            user_mass += weights[i];
        }
    }
    if (user_mass == 0.0) return std::nullopt;
    double entropy = 0.0;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        if (keys[i] == query_position || map.classify(keys[i]) != Bucket::User) continue;
        const double p = weights[i] / user_mass;
        if (p > 0.0) entropy -= p * std::log(p);
    }
    return entropy;
}

std::vector<std::optional<double>> layer_curvatures(
    std::span<const std::vector<float>> states) {
    const std::size_t n = states.size();
    std::vector<std::optional<double>> out(n);
    if (n < 3) return out;
    const std::size_t dim = states[0].size();
    for (const std::vector<float>& s : states) {
        if (s.size() != dim) {
            throw std::invalid_argument("layer_curvatures: ragged state widths");
        }
    }
    for (std::size_t l = 1; l + 1 < n; ++l) {  // 1-based layers 2..n-1
        double dot = 0.0, prev_sq = 0.0, next_sq = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            const double prev = static_cast<double>(states[l][j]) - states[l - 1][j];
            const double next = static_cast<double>(states[l + 1][j]) - states[l][j];
            dot += prev * next;
            prev_sq += prev * prev;
            next_sq += next * next;
        }
        if (prev_sq == 0.0 || next_sq == 0.0) continue;  // no direction: absent
        const double cosine =
            std::clamp(dot / (std::sqrt(prev_sq) * std::sqrt(next_sq)), -1.0, 1.0);
        out[l] = std::acos(cosine);
    }
    return out;
}

PeakSummary peak_summary(std::span<const LayerDiagnostics> layers) {
    if (layers.size() < 2) {
        throw std::invalid_argument("peak_summary: need at least two layers");
    }
    PeakSummary s;
    auto mass_peak = [&](auto&& member) {
        return argmax_layer(layers, [&](const LayerDiagnostics& l) -> std::optional<double> {
            const double v = member(l);
            return v > 0.0 ? std::optional<double>(v) : std::nullopt;
        });
    };
    s.prompt_peak_layer = mass_peak([](const LayerDiagnostics& l) { return l.masses.user; });
    s.bos_peak_layer = mass_peak([](const LayerDiagnostics& l) { return l.masses.bos; });
    s.decode_peak_layer = mass_peak([](const LayerDiagnostics& l) { return l.masses.decode; });
    s.entropy_min_layer = argmax_layer(layers, [](const LayerDiagnostics& l) {
        return l.prompt_entropy ? std::optional<double>(-*l.prompt_entropy) : std::nullopt;
    });
    s.straightening_peak_layer =
        argmax_layer(layers, [](const LayerDiagnostics& l) { return l.straightening; });
    if (s.entropy_min_layer && s.straightening_peak_layer) {
        s.entropy_minus_straightening = *s.entropy_min_layer - *s.straightening_peak_layer;
    }

    // Pearson correlation of straightening against negated entropy.
    double sum_x = 0.0, sum_y = 0.0;
    int n = 0;
    for (const LayerDiagnostics& l : layers) {
        if (l.straightening && l.prompt_entropy) {
            sum_x += *l.straightening;
            sum_y += -*l.prompt_entropy;
            ++n;
        }
    }
    if (n >= 2) {
        const double mean_x = sum_x / n, mean_y = sum_y / n;
        double sxx = 0.0, syy = 0.0, sxy = 0.0;
        for (const LayerDiagnostics& l : layers) {
            if (!l.straightening || !l.prompt_entropy) continue;
            const double dx = *l.straightening - mean_x;
            const double dy = -*l.prompt_entropy - mean_y;
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
        }
        if (sxx > 0.0 && syy > 0.0) {
            s.straightening_entropy_corr = sxy / std::sqrt(sxx * syy);
        }
    }
    return s;
}

TraceDiagnostics summarize_trace(const GenerationTrace& trace, const SpanMap& map) {
    const std::size_t n_layers = static_cast<std::size_t>(trace.config.n_layers);
    if (trace.steps.empty()) {
        throw std::invalid_argument("summarize_trace: trace has no steps");
    }
    for (const StepRecord& step : trace.steps) {
        if (step.attn_keys.size() != n_layers || step.hidden.size() != n_layers) {
            throw std::invalid_argument(
                "summarize_trace: trace lacks attention/hidden captures (record it with "
                "CaptureOptions{true, true})");
        }
    }

    std::vector<BucketMasses> mass_sum(n_layers);
    std::vector<double> entropy_sum(n_layers, 0.0);
    std::vector<int> entropy_count(n_layers, 0);
    std::vector<double> curvature_sum(n_layers, 0.0);
    std::vector<int> curvature_count(n_layers, 0);

    for (const StepRecord& step : trace.steps) {
        for (std::size_t li = 0; li < n_layers; ++li) {
            const BucketMasses m = attention_mass_by_bucket(step.attn_keys[li],
                                                            step.attn_weights[li], map,
                                                            step.query_position);
            mass_sum[li].user += m.user;
            mass_sum[li].bos += m.bos;
            mass_sum[li].decode += m.decode;
            mass_sum[li].other += m.other;
            const std::optional<double> h = conditional_prompt_entropy(
                step.attn_keys[li], step.attn_weights[li], map, step.query_position);
            if (h) {
                entropy_sum[li] += *h;
                ++entropy_count[li];
            }
        }
        const std::vector<std::optional<double>> curv = layer_curvatures(step.hidden);
        for (std::size_t li = 0; li < n_layers; ++li) {
            if (curv[li]) {
                curvature_sum[li] += *curv[li];
                ++curvature_count[li];
            }
        }
    }

    TraceDiagnostics out;
    out.layers.resize(n_layers);
    const double n_steps = static_cast<double>(trace.steps.size());
    for (std::size_t li = 0; li < n_layers; ++li) {
        LayerDiagnostics& l = out.layers[li];
        l.masses = {mass_sum[li].user / n_steps, mass_sum[li].bos / n_steps,
                    mass_sum[li].decode / n_steps, mass_sum[li].other / n_steps};
        if (entropy_count[li] > 0) l.prompt_entropy = entropy_sum[li] / entropy_count[li];
        if (curvature_count[li] > 0) l.curvature = curvature_sum[li] / curvature_count[li];
    }
    // Straightening relative to the first layer with a measurable curvature.
    const auto first = std::find_if(out.layers.begin(), out.layers.end(),
                                    [](const LayerDiagnostics& l) { return l.curvature.has_value(); });
    if (first != out.layers.end()) {
        const double base = *first->curvature;
        for (LayerDiagnostics& l : out.layers) {
            if (l.curvature) l.straightening = base - *l.curvature;
        }
    }
    out.peaks = peak_summary(out.layers);
    return out;
}

}  // namespace kvband

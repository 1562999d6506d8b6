// Diagnostics tests. Bucket masses, conditional entropy, and curvature come
// with hand-computed fixtures; peak selection and the straightening summary
// are exercised on synthetic layer profiles with engineered extrema, then the
// whole pipeline runs over a real captured trace for structural invariants.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <kvband/diagnostics.hpp>
#include <kvband/engine.hpp>

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

using kvband::Bucket;
using kvband::BucketMasses;
using kvband::LayerDiagnostics;
using kvband::SpanMap;

namespace {

constexpr double kLn3 = 1.0986122886681098;  // ln 3

SpanMap anchored_map(std::size_t prompt_len) { return SpanMap{prompt_len, true}; }

}  // namespace

TEST_CASE("span map classification") {
    const SpanMap map = anchored_map(4);
    CHECK(map.classify(0) == Bucket::Bos);
    CHECK(map.classify(1) == Bucket::User);
    CHECK(map.classify(3) == Bucket::User);
    CHECK(map.classify(4) == Bucket::Decode);
    CHECK(map.classify(9) == Bucket::Decode);

    const SpanMap plain{4, false};
    CHECK(plain.classify(0) == Bucket::User);
}

TEST_CASE("bucket masses: hand fixture with self routed to Other") {
    // Anchored prompt of 4; the query is the trigger at position 3. Uniform
    // row over keys 0..3: Bos gets 0.25 (pos 0), User gets 0.5 (pos 1, 2),
    // Other gets 0.25 (self), Decode gets 0.
    const std::vector<std::size_t> keys{0, 1, 2, 3};
    const std::vector<float> weights{0.25f, 0.25f, 0.25f, 0.25f};
    const BucketMasses m = kvband::attention_mass_by_bucket(keys, weights, anchored_map(4), 3);
    CHECK(m.bos == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(m.user == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(m.other == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(m.decode == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(m.total() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("bucket masses: decode keys and validation") {
    const SpanMap map = anchored_map(3);
    // Query at position 5 (decode), keys: anchor, user, decode, self.
    const std::vector<std::size_t> keys{0, 1, 4, 5};
    const std::vector<float> weights{0.1f, 0.2f, 0.3f, 0.4f};
    const BucketMasses m = kvband::attention_mass_by_bucket(keys, weights, map, 5);
    CHECK(m.bos == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(m.user == doctest::Approx(0.2).epsilon(1e-6));
    CHECK(m.decode == doctest::Approx(0.3).epsilon(1e-6));
    CHECK(m.other == doctest::Approx(0.4).epsilon(1e-6));

    SUBCASE("length mismatch") {
        const std::vector<float> short_weights{0.5f, 0.5f};
        CHECK_THROWS_AS((void)kvband::attention_mass_by_bucket(keys, short_weights, map, 5),
                        std::invalid_argument);
    }
    SUBCASE("negative weight") {
        const std::vector<float> negative{0.5f, 0.6f, -0.1f, 0.0f};
        CHECK_THROWS_AS((void)kvband::attention_mass_by_bucket(keys, negative, map, 5),
                        std::invalid_argument);
    }
    SUBCASE("mass far from one") {
        const std::vector<float> degenerate{0.1f, 0.1f, 0.1f, 0.1f};
        CHECK_THROWS_AS((void)kvband::attention_mass_by_bucket(keys, degenerate, map, 5),
                        std::invalid_argument);
    }
}

TEST_CASE("conditional prompt entropy: uniform over three user keys gives ln 3") {
    // Anchored prompt of 5, query = trigger at 4. User keys are 1, 2, 3 with
    // equal weights; anchor and self take the rest.
    const std::vector<std::size_t> keys{0, 1, 2, 3, 4};
    const std::vector<float> weights{0.22f, 0.16f, 0.16f, 0.16f, 0.30f};
    const auto h = kvband::conditional_prompt_entropy(keys, weights, anchored_map(5), 4);
    REQUIRE(h.has_value());
    CHECK(*h == doctest::Approx(kLn3).epsilon(1e-9));
}

TEST_CASE("conditional prompt entropy: skewed two-key fixture") {
    // User keys 1 and 2 carry 0.15 and 0.05: renormalized to (0.75, 0.25),
    // H = -(0.75 ln 0.75 + 0.25 ln 0.25).
    const std::vector<std::size_t> keys{0, 1, 2, 3};
    const std::vector<float> weights{0.5f, 0.15f, 0.05f, 0.3f};
    const auto h = kvband::conditional_prompt_entropy(keys, weights, anchored_map(4), 3);
    REQUIRE(h.has_value());
    const double expect = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25));
    CHECK(*h == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("conditional prompt entropy: absent when user mass is zero") {
    // Degenerate row: everything on the anchor and self.
    const std::vector<std::size_t> keys{0, 1, 2, 3};
    const std::vector<float> weights{0.6f, 0.0f, 0.0f, 0.4f};
    const auto h = kvband::conditional_prompt_entropy(keys, weights, anchored_map(4), 3);
    CHECK_FALSE(h.has_value());
    // A single user key with all its mass: defined, and exactly zero.
    const std::vector<float> point{0.6f, 0.4f, 0.0f, 0.0f};
    const auto h2 = kvband::conditional_prompt_entropy(keys, point, anchored_map(4), 3);
    REQUIRE(h2.has_value());
    CHECK(*h2 == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("layer curvatures: collinear, right-angle, and degenerate steps") {
    SUBCASE("straight trajectory has zero curvature everywhere measurable") {
        // h_l = l * (1, 0): all deltas equal.
        std::vector<std::vector<float>> states;
        for (int l = 1; l <= 5; ++l) states.push_back({float(l), 0.0f});
        const auto curv = kvband::layer_curvatures(states);
        REQUIRE(curv.size() == 5);
        CHECK_FALSE(curv[0].has_value());  // boundary
        CHECK_FALSE(curv[4].has_value());  // boundary
        for (int l = 1; l <= 3; ++l) {
            REQUIRE(curv[std::size_t(l)].has_value());
            CHECK(*curv[std::size_t(l)] == doctest::Approx(0.0).epsilon(1e-9));
        }
    }
    SUBCASE("right-angle turn measures pi/2") {
        const std::vector<std::vector<float>> states{
            {0.0f, 0.0f}, {1.0f, 0.0f}, {1.0f, 1.0f}};
        const auto curv = kvband::layer_curvatures(states);
        REQUIRE(curv.size() == 3);
        REQUIRE(curv[1].has_value());
        CHECK(*curv[1] == doctest::Approx(std::numbers::pi / 2).epsilon(1e-9));
    }
    SUBCASE("reversal measures pi") {
        const std::vector<std::vector<float>> states{
            {0.0f, 0.0f}, {1.0f, 0.0f}, {0.0f, 0.0f}};
        const auto curv = kvband::layer_curvatures(states);
        REQUIRE(curv[1].has_value());
        CHECK(*curv[1] == doctest::Approx(std::numbers::pi).epsilon(1e-9));
    }
    SUBCASE("zero-norm delta suppresses the adjacent angles") {
        const std::vector<std::vector<float>> states{
            {0.0f, 0.0f}, {0.0f, 0.0f}, {1.0f, 0.0f}, {2.0f, 0.0f}};
        const auto curv = kvband::layer_curvatures(states);
        REQUIRE(curv.size() == 4);
        CHECK_FALSE(curv[1].has_value());  // lower delta is zero
        REQUIRE(curv[2].has_value());
        CHECK(*curv[2] == doctest::Approx(0.0).epsilon(1e-9));
    }
    SUBCASE("fewer than three states leaves everything absent") {
        const std::vector<std::vector<float>> states{{0.0f}, {1.0f}};
        const auto curv = kvband::layer_curvatures(states);
        REQUIRE(curv.size() == 2);
        CHECK_FALSE(curv[0].has_value());
        CHECK_FALSE(curv[1].has_value());
    }
    SUBCASE("ragged widths throw") {
        const std::vector<std::vector<float>> states{{0.0f, 0.0f}, {1.0f}, {2.0f, 0.0f}};
        CHECK_THROWS_AS((void)kvband::layer_curvatures(states), std::invalid_argument);
    }
}

TEST_CASE("peak summary picks engineered extrema with low-layer tie breaks") {
    // Six layers with hand-placed peaks: user mass peaks at layer 3 (tie with
    // layer 5 broken low), bos at layer 1, decode at layer 6, entropy minimum
    // at layer 5, straightening peak at layer 4.
    std::vector<LayerDiagnostics> layers(6);
    const double user[] = {0.1, 0.2, 0.6, 0.3, 0.6, 0.1};
    const double bos[] = {0.5, 0.3, 0.1, 0.2, 0.1, 0.1};
    const double decode[] = {0.1, 0.2, 0.1, 0.2, 0.1, 0.5};
    const double entropy[] = {2.0, 1.8, 1.5, 1.2, 0.4, 1.0};
    const double straightening[] = {0.0, 0.1, 0.5, 0.9, 0.7, 0.2};
    for (int l = 0; l < 6; ++l) {
        layers[std::size_t(l)].masses.user = user[l];
        layers[std::size_t(l)].masses.bos = bos[l];
        layers[std::size_t(l)].masses.decode = decode[l];
        layers[std::size_t(l)].masses.other =
            1.0 - user[l] - bos[l] - decode[l];
        layers[std::size_t(l)].prompt_entropy = entropy[l];
        layers[std::size_t(l)].straightening = straightening[l];
    }
    const auto peaks = kvband::peak_summary(layers);
    CHECK(peaks.prompt_peak_layer == 3);
    CHECK(peaks.bos_peak_layer == 1);
    CHECK(peaks.decode_peak_layer == 6);
    CHECK(peaks.entropy_min_layer == 5);
    CHECK(peaks.straightening_peak_layer == 4);
    REQUIRE(peaks.entropy_minus_straightening.has_value());
    CHECK(*peaks.entropy_minus_straightening == 1);
}

TEST_CASE("peak summary: perfect correlation fixture") {
    // straightening == -entropy + const: Pearson corr(S, -H) == +1.
    std::vector<LayerDiagnostics> layers(4);
    const double entropy[] = {2.0, 1.5, 1.0, 0.5};
    for (int l = 0; l < 4; ++l) {
        layers[std::size_t(l)].masses.other = 1.0;
        layers[std::size_t(l)].prompt_entropy = entropy[l];
        layers[std::size_t(l)].straightening = 3.0 - entropy[l];
    }
    const auto peaks = kvband::peak_summary(layers);
    REQUIRE(peaks.straightening_entropy_corr.has_value());
    CHECK(*peaks.straightening_entropy_corr == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("peak summary: absent buckets, constant series, and size guard") {
    std::vector<LayerDiagnostics> layers(3);
    for (auto& l : layers) {
        l.masses.other = 1.0;  // every content bucket is zero at every layer
        l.prompt_entropy = 1.0;
        l.straightening = 0.5;  // constant: correlation undefined
    }
    const auto peaks = kvband::peak_summary(layers);
    CHECK_FALSE(peaks.prompt_peak_layer.has_value());
    CHECK_FALSE(peaks.bos_peak_layer.has_value());
    CHECK_FALSE(peaks.decode_peak_layer.has_value());
    CHECK(peaks.entropy_min_layer == 1);  // constant entropy: lowest layer wins
    CHECK_FALSE(peaks.straightening_entropy_corr.has_value());

    const std::vector<LayerDiagnostics> too_small(1);
    CHECK_THROWS_AS((void)kvband::peak_summary(too_small), std::invalid_argument);
}

TEST_CASE("summarize_trace runs end to end on a captured generation") {
    kvband::ModelConfig config;
    config.n_layers = 4;
    config.d_model = 16;
    config.n_heads = 4;
    config.n_kv_heads = 2;
    config.d_head = 4;
    config.d_ff = 48;
    config.vocab_size = 61;
    config.init_seed = 5;
    const auto weights = kvband::init_weights(config);
    const auto policy = kvband::VisibilityPolicy::parse("speed+bos:2");
    const auto prompt = kvband::synthetic_prompt(config, policy, 10, 77);

    kvband::CaptureOptions capture;
    capture.attn_rows = true;
    capture.hidden_states = true;
    const auto trace = kvband::generate(weights, policy, prompt, 6, capture);

    const SpanMap map = kvband::span_map_for(trace);
    CHECK(map.prompt_len == 10);
    CHECK(map.anchored);

    const auto diag = kvband::summarize_trace(trace, map);
    REQUIRE(diag.layers.size() == 4);
    for (std::size_t l = 0; l < diag.layers.size(); ++l) {
        CAPTURE(l);
        const auto& layer = diag.layers[l];
        CHECK(layer.masses.total() == doctest::Approx(1.0).epsilon(1e-5));
        CHECK(layer.masses.user >= 0.0);
        CHECK(layer.masses.bos >= 0.0);
        CHECK(layer.masses.decode >= 0.0);
        CHECK(layer.masses.other >= 0.0);
        if (layer.prompt_entropy.has_value()) {
            // |U| <= 9 non-anchor prompt keys: H in [0, ln 9].
            CHECK(*layer.prompt_entropy >= 0.0);
            CHECK(*layer.prompt_entropy <= std::log(9.0) + 1e-9);
        }
    }
    // Upper band (layers 3, 4) under speed+bos: no user keys are materialized
    // for decode queries, so user mass is exactly zero there and the entropy
    // is undefined.
    CHECK(diag.layers[2].masses.user == 0.0);
    CHECK(diag.layers[3].masses.user == 0.0);
    CHECK_FALSE(diag.layers[2].prompt_entropy.has_value());
    // Lower band sees the prompt.
    CHECK(diag.layers[0].masses.user > 0.0);
    REQUIRE(diag.layers[0].prompt_entropy.has_value());

    // Straightening is zero at the first measurable layer by construction.
    bool found_reference = false;
    for (const auto& layer : diag.layers) {
        if (layer.straightening.has_value()) {
            CHECK(*layer.straightening == doctest::Approx(0.0).epsilon(1e-12));
            found_reference = true;
            break;
        }
    }
    CHECK(found_reference);

    // A trace without captures is rejected.
    const auto bare = kvband::generate(weights, policy, prompt, 3);
    CHECK_THROWS_AS((void)kvband::summarize_trace(bare, map), std::invalid_argument);
}

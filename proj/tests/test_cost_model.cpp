// Cost model tests. The sweep fixtures below freeze the published reference
// tables for the 8B-scale preset: 40 active-KV GiB cells (8 prompt lengths x
// full + 4 cutoffs, 3 decimals) with their printed reduction line, and the
// matching estimated-FLOPs table (teraFLOPs + reduction percentages). The GiB
// cells were re-derived from the closed form independently of the library.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <kvband/cost_model.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

using kvband::CostInputs;
using kvband::ProxyReport;

namespace {

constexpr std::uint64_t kLens[] = {1024, 2048, 4096, 8192, 16384, 32768, 65536, 131072};
constexpr int kCutoffs[] = {16, 20, 24, 28};

struct SweepCell {
    double value;  // GiB or teraFLOPs
    double pct;    // printed reduction vs full
};

struct SweepRow {
    double full;
    SweepCell cells[4];  // cutoffs 16, 20, 24, 28
};

// Active KV memory, GiB at 3 decimals; printed reductions use the rounded
// GiB values (the table's convention), not exact bytes.
constexpr SweepRow kKvTable[8] = {
    {0.141, {{0.078, 44.7}, {0.094, 33.3}, {0.109, 22.7}, {0.125, 11.3}}},
    {0.266, {{0.141, 47.0}, {0.172, 35.3}, {0.203, 23.7}, {0.234, 12.0}}},
    {0.516, {{0.266, 48.4}, {0.328, 36.4}, {0.391, 24.2}, {0.453, 12.2}}},
    {1.016, {{0.516, 49.2}, {0.641, 36.9}, {0.766, 24.6}, {0.891, 12.3}}},
    {2.016, {{1.016, 49.6}, {1.266, 37.2}, {1.516, 24.8}, {1.766, 12.4}}},
    {4.016, {{2.016, 49.8}, {2.516, 37.4}, {3.016, 24.9}, {3.516, 12.5}}},
    {8.016, {{4.016, 49.9}, {5.016, 37.4}, {6.016, 25.0}, {7.016, 12.5}}},
    {16.016, {{8.016, 50.0}, {10.016, 37.5}, {12.016, 25.0}, {14.016, 12.5}}},
};

// Estimated whole-model FLOPs, teraFLOPs, with reduction percentages. The
// calibrated estimator must land within 0.02 TF and 0.1 percentage points.
constexpr SweepRow kFlopsTable[8] = {
    {16.828, {{9.432, 44.0}, {11.281, 33.0}, {13.130, 22.0}, {14.979, 11.0}}},
    {32.853, {{17.479, 46.8}, {21.323, 35.1}, {25.166, 23.4}, {29.010, 11.7}}},
    {68.228, {{35.235, 48.4}, {43.483, 36.3}, {51.731, 24.2}, {59.980, 12.1}}},
    {152.274, {{77.395, 49.2}, {96.115, 36.9}, {114.834, 24.6}, {133.554, 12.3}}},
    {373.554, {{188.310, 49.6}, {234.621, 37.2}, {280.932, 24.8}, {327.243, 12.4}}},
    {1028.870, {{516.518, 49.8}, {644.606, 37.3}, {772.694, 24.9}, {900.782, 12.4}}},
    {3190.525, {{1598.445, 49.9}, {1996.465, 37.4}, {2394.485, 25.0}, {2792.505, 12.5}}},
    {10917.923, {{5464.343, 50.0}, {6827.738, 37.5}, {8191.133, 25.0}, {9554.528, 12.5}}},
};

CostInputs tiny_inputs() {
    CostInputs c;
    c.L = 4;
    c.K = 2;
    c.N = 10;
    c.a = 1;
    c.T = 3;
    c.n_kv = 2;
    c.d_head = 4;
    c.b = 2;
    return c;
}

}  // namespace

TEST_CASE("byte formulas match hand arithmetic") {
    const CostInputs c = tiny_inputs();
    // B_KV = 2*2*4*2 = 32 bytes per token-layer.
    CHECK(kvband::bytes_kv_per_token(c.n_kv, c.d_head, c.b) == 32);
    // full: 32 * L * (N+a+T) = 32 * 4 * 14 = 1792.
    CHECK(kvband::bytes_full(c) == 1792);
    // speed: 32 * (K*N + L*a + L*T) = 32 * (20 + 4 + 12) = 1152.
    CHECK(kvband::bytes_speed(c) == 1152);

    // K == L collapses speed to full.
    CostInputs deep = c;
    deep.K = deep.L;
    CHECK(kvband::bytes_speed(deep) == kvband::bytes_full(deep));
}

TEST_CASE("validate rejects out-of-range shapes") {
    CostInputs c = tiny_inputs();
    c.K = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_inputs();
    c.K = c.L + 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_inputs();
    c.L = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_inputs();
    c.n_kv = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("gib conversion and rounding helpers") {
    CHECK(kvband::to_gib(1ull << 30) == 1.0);
    CHECK(kvband::to_gib(1ull << 29) == 0.5);
    CHECK(kvband::round_decimals(3.14159, 3) == doctest::Approx(3.142).epsilon(1e-12));
    CHECK(kvband::round_decimals(3.14159, 1) == doctest::Approx(3.1).epsilon(1e-12));
    CHECK(kvband::round_decimals(-2.5, 0) == doctest::Approx(-3.0).epsilon(1e-12));
}

TEST_CASE("reference preset pins the published sweep shape") {
    const CostInputs c = kvband::reference_preset(1024, 16);
    CHECK(c.L == 32);
    CHECK(c.K == 16);
    CHECK(c.N == 1023);  // anchor excluded
    CHECK(c.a == 1);
    CHECK(c.T == 128);
    CHECK(c.n_kv == 8);
    CHECK(c.d_head == 128);
    CHECK(c.b == 2);
    CHECK_THROWS_AS((void)kvband::reference_preset(0, 16), std::invalid_argument);
    CHECK_THROWS_AS((void)kvband::reference_preset(1024, 0), std::invalid_argument);
}

TEST_CASE("active KV sweep reproduces all 40 frozen GiB cells") {
    for (std::size_t i = 0; i < 8; ++i) {
        const std::uint64_t len = kLens[i];
        CAPTURE(len);
        const double full_gib =
            kvband::round_decimals(kvband::to_gib(kvband::bytes_full(kvband::reference_preset(len, 32))), 3);
        CHECK(full_gib == doctest::Approx(kKvTable[i].full).epsilon(1e-9));
        for (std::size_t j = 0; j < 4; ++j) {
            const int k = kCutoffs[j];
            CAPTURE(k);
            const double gib = kvband::round_decimals(
                kvband::to_gib(kvband::bytes_speed(kvband::reference_preset(len, k))), 3);
            CHECK(gib == doctest::Approx(kKvTable[i].cells[j].value).epsilon(1e-9));
            // Printed reduction line: computed from the rounded GiB values.
            const double printed_pct =
                kvband::round_decimals(100.0 * (1.0 - gib / full_gib), 1);
            CHECK(printed_pct == doctest::Approx(kKvTable[i].cells[j].pct).epsilon(1e-9));
        }
    }
}

TEST_CASE("rounded-GiB reduction convention differs from exact bytes where expected") {
    // 1K prompt, cutoff 16: rounded GiB give 44.7%, exact bytes give 44.4%.
    const auto full = kvband::reference_preset(1024, 32);
    const auto speed = kvband::reference_preset(1024, 16);
    const double exact_pct =
        100.0 * (1.0 - double(kvband::bytes_speed(speed)) / double(kvband::bytes_full(full)));
    CHECK(kvband::round_decimals(exact_pct, 1) == doctest::Approx(44.4).epsilon(1e-9));
    const double rounded_pct =
        100.0 * (1.0 - kvband::round_decimals(kvband::to_gib(kvband::bytes_speed(speed)), 3) /
                           kvband::round_decimals(kvband::to_gib(kvband::bytes_full(full)), 3));
    CHECK(kvband::round_decimals(rounded_pct, 1) == doctest::Approx(44.7).epsilon(1e-9));
}

TEST_CASE("calibrated FLOPs estimator reproduces the published sweep") {
    for (std::size_t i = 0; i < 8; ++i) {
        const std::uint64_t len = kLens[i];
        CAPTURE(len);
        const double full_tf = kvband::flops_estimate(len, 32) / 1e12;
        CHECK(std::abs(full_tf - kFlopsTable[i].full) <= 0.02);
        for (std::size_t j = 0; j < 4; ++j) {
            const int k = kCutoffs[j];
            CAPTURE(k);
            const double tf = kvband::flops_estimate(len, k) / 1e12;
            CHECK(std::abs(tf - kFlopsTable[i].cells[j].value) <= 0.02);
            const double pct = 100.0 * (1.0 - kvband::flops_estimate(len, k) /
                                                  kvband::flops_estimate(len, 32));
            CHECK(std::abs(pct - kFlopsTable[i].cells[j].pct) <= 0.1);
        }
    }
}

TEST_CASE("flops_estimate validates its domain") {
    CHECK_THROWS_AS((void)kvband::flops_estimate(0, 16), std::invalid_argument);
    CHECK_THROWS_AS((void)kvband::flops_estimate(1024, 0), std::invalid_argument);
    CHECK_THROWS_AS((void)kvband::flops_estimate(1024, 33), std::invalid_argument);
}

TEST_CASE("layer-token proxy: unit view follows the literal formula") {
    const CostInputs c = tiny_inputs();
    const ProxyReport r = kvband::layer_token_proxy(c);
    CHECK(r.full_units == 4 * 11);       // L * (N + a)
    CHECK(r.speed_units == 2 * 10 + 4);  // K*N + L*a
    CHECK(r.unit_reduction_pct == doctest::Approx(100.0 * (1.0 - 24.0 / 44.0)).epsilon(1e-12));
    // Non-reference shape: no flops view; reduction falls back to units.
    CHECK_FALSE(r.flops_full.has_value());
    CHECK_FALSE(r.flops_speed.has_value());
    CHECK(r.reduction_pct == r.unit_reduction_pct);
}

TEST_CASE("layer-token proxy: reference shape switches to the FLOPs view") {
    const ProxyReport r = kvband::layer_token_proxy(kvband::reference_preset(1024, 16));
    REQUIRE(r.flops_full.has_value());
    REQUIRE(r.flops_speed.has_value());
    CHECK(r.full_units == 32ull * 1024);
    CHECK(r.speed_units == 16ull * 1023 + 32);
    // The unit view alone would claim ~50%; the whole-model estimate says 44%.
    CHECK(r.unit_reduction_pct == doctest::Approx(49.95).epsilon(1e-3));
    CHECK(std::abs(r.reduction_pct - 44.0) <= 0.1);
    CHECK(*r.flops_full > *r.flops_speed);
}

TEST_CASE("speedup_ratio") {
    CHECK(kvband::speedup_ratio({10.0, 0.1}, {5.0, 0.1}) == doctest::Approx(2.0));
    CHECK_THROWS_AS((void)kvband::speedup_ratio({0.0, 0.0}, {5.0, 0.1}), std::invalid_argument);
    CHECK_THROWS_AS((void)kvband::speedup_ratio({5.0, 0.1}, {-1.0, 0.0}), std::invalid_argument);
}

TEST_CASE("cost_table and CSV emit the golden rows") {
    CostInputs shape = kvband::reference_preset(1024, 16);  // N is overwritten per row
    const std::vector<std::uint64_t> lens{1024};
    const std::vector<std::string> policies{"full", "speed:16"};
    const auto rows = kvband::cost_table(shape, lens, policies);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].policy == "full");
    CHECK(rows[0].bytes == 150994944);
    CHECK(rows[1].policy == "speed:16");
    CHECK(rows[1].bytes == 83951616);
    CHECK(rows[1].proxy_units == 16400);

    const std::string csv = kvband::cost_csv_string(rows);
    const std::string expect =
        "prompt_len,policy,bytes,gib,reduction_pct,proxy_units,proxy_reduction_pct\n"
        "1024,full,150994944,0.141,0.0,32768,0.0\n"
        "1024,speed:16,83951616,0.078,44.4,16400,44.0\n";
    CHECK(csv == expect);

    const auto path = std::filesystem::temp_directory_path() / "kvband_cost_test.csv";
    kvband::write_cost_csv(rows, path);
    std::ifstream in(path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    CHECK(buffer.str() == expect);
    std::filesystem::remove(path);
}

TEST_CASE("cost_table validates prompt lengths and policies") {
    const CostInputs shape = kvband::reference_preset(1024, 16);
    const std::vector<std::string> policies{"full"};
    const std::vector<std::uint64_t> too_short{1};  // shorter than anchor + 1
    CHECK_THROWS_AS((void)kvband::cost_table(shape, too_short, policies), std::invalid_argument);

    const std::vector<std::uint64_t> lens{1024};
    const std::vector<std::string> bad_policy{"speed:40"};  // cutoff above L = 32
    CHECK_THROWS_AS((void)kvband::cost_table(shape, lens, bad_policy), std::invalid_argument);
    const std::vector<std::string> unparsable{"warp:4"};
    CHECK_THROWS_AS((void)kvband::cost_table(shape, lens, unparsable), std::invalid_argument);
}

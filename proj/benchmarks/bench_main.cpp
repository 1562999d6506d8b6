// Micro-benchmarks for the inference primitives and the phase-asymmetric
// prefill/decode paths. Wall-clock sweeps with statistics live in the CLI
// (`kvband bench`); these isolate per-component costs.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "kvband/engine.hpp"
#include "kvband/loop_detector.hpp"
#include "kvband/matrix.hpp"
#include "kvband/model.hpp"

namespace {

using namespace kvband;

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.0f, 1.0f);
    Matrix m(rows, cols);
    for (float& v : m.data) v = dist(rng);
    return m;
}

void BM_matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, n, 1);
    const Matrix b = random_matrix(n, n, 2);
    for (auto _ : state) {
        Matrix c = matmul(a, b);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * n * n * n);
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_masked_softmax(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    std::mt19937_64 rng(3);
    std::normal_distribution<float> dist(0.0f, 1.0f);
    std::vector<float> scores(n);
    for (float& v : scores) v = dist(rng);
    std::vector<std::uint8_t> mask(n, 0);
    for (std::size_t i = 0; i < n; i += 2) mask[i] = 1;  // half visible
    for (auto _ : state) {
        auto row = masked_softmax_row(scores, mask);
        benchmark::DoNotOptimize(row.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * n);
}
BENCHMARK(BM_masked_softmax)->Arg(256)->Arg(4096);

// Prefill under full visibility vs a shallow band: the banded run should
// scale with its cutoff, not the full depth.
void prefill_policy_bench(benchmark::State& state, const VisibilityPolicy& policy) {
    const ModelConfig config;  // library defaults: 8 layers, d_model 64
    const ModelWeights weights = init_weights(config);
    const auto len = static_cast<std::size_t>(state.range(0));
    const std::vector<int> prompt = synthetic_prompt(config, policy, len, 99);
    for (auto _ : state) {
        PrefillResult result = prefill(weights, policy, prompt);
        benchmark::DoNotOptimize(result.trigger_state.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * len);
}

void BM_prefill_full(benchmark::State& state) {
    prefill_policy_bench(state, VisibilityPolicy::parse("full"));
}
void BM_prefill_speed(benchmark::State& state) {
    prefill_policy_bench(state, VisibilityPolicy::parse("speed:4"));
}
BENCHMARK(BM_prefill_full)->Arg(256)->Arg(1024);
BENCHMARK(BM_prefill_speed)->Arg(256)->Arg(1024);

// Decode throughput after a banded prefill; each iteration advances the
// cache, so the cost reflects a growing decode history.
void BM_decode_steps(benchmark::State& state) {
    const ModelConfig config;
    const ModelWeights weights = init_weights(config);
    const VisibilityPolicy policy = VisibilityPolicy::parse("speed:4");
    const std::vector<int> prompt = synthetic_prompt(config, policy, 256, 7);
    constexpr int kTokens = 16;
    for (auto _ : state) {
        state.PauseTiming();
        PrefillResult pre = prefill(weights, policy, prompt);
        const std::vector<float> normed =
            rms_norm(pre.trigger_state, weights.final_norm_gain, kNormEps);
        int next = argmax_token(logits(weights, normed));
        state.ResumeTiming();
        for (int step = 0; step < kTokens; ++step) {
            next = decode_step(weights, policy, pre.cache, pre.history, next,
                               prompt.size() + static_cast<std::size_t>(step))
                       .next_token;
        }
        benchmark::DoNotOptimize(next);
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * kTokens);
}
BENCHMARK(BM_decode_steps);

void BM_loop_detector(benchmark::State& state) {
    std::vector<int> tokens;
    std::mt19937_64 rng(11);
    for (int i = 0; i < 200; ++i) tokens.push_back(static_cast<int>(rng() % 50));
    for (int i = 0; i < 120; ++i) tokens.push_back(i % 7);  // periodic tail
    for (auto _ : state) {
        LoopReport report = detect_loop(tokens);
        benchmark::DoNotOptimize(&report);
    }
}
BENCHMARK(BM_loop_detector);

}  // namespace

int main(int argc, char** argv) {
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    return 0;
}

// Engine tests: prompt classification, greedy decoding mechanics, realized
// cost symbols, capture shapes, engine-vs-reference equivalence spot checks,
// and the JSONL trace round trip.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <kvband/engine.hpp>
#include <kvband/verify.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <vector>

using kvband::CaptureOptions;
using kvband::GenerationTrace;
using kvband::ModelConfig;
using kvband::ModelWeights;
using kvband::TokenClass;
using kvband::VisibilityPolicy;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 4;
    c.d_model = 16;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.d_head = 4;
    c.d_ff = 48;
    c.vocab_size = 61;
    c.init_seed = 7;
    return c;
}

const ModelWeights& small_weights() {
    static const ModelWeights w = kvband::init_weights(small_config());
    return w;
}

}  // namespace

TEST_CASE("argmax breaks ties toward the lowest token id") {
    const std::vector<float> flat{1.0f, 1.0f, 1.0f};
    CHECK(kvband::argmax_token(flat) == 0);
    const std::vector<float> tie_later{0.0f, 2.0f, 2.0f, -1.0f};
    CHECK(kvband::argmax_token(tie_later) == 1);
    const std::vector<float> single{-5.0f};
    CHECK(kvband::argmax_token(single) == 0);
}

TEST_CASE("classify_prompt assigns anchor, body, and trigger") {
    const auto& w = small_weights();
    const auto anchored = VisibilityPolicy::parse("speed+bos:2");
    const int bos = w.config.bos_id();

    const std::vector<int> prompt{bos, 10, 11, 12};
    const auto classes = kvband::classify_prompt(w, anchored, prompt);
    REQUIRE(classes.size() == 4);
    CHECK(classes[0].cls == TokenClass::BosAnchor);
    CHECK(classes[1].cls == TokenClass::PrefillBody);
    CHECK(classes[2].cls == TokenClass::PrefillBody);
    CHECK(classes[3].cls == TokenClass::DecodeCurrent);  // the trigger
    for (std::size_t i = 0; i < classes.size(); ++i) CHECK(classes[i].position == i);

    const auto plain = VisibilityPolicy::parse("speed:2");
    const auto plain_classes = kvband::classify_prompt(w, plain, std::vector<int>{10, 11});
    CHECK(plain_classes[0].cls == TokenClass::PrefillBody);
    CHECK(plain_classes[1].cls == TokenClass::DecodeCurrent);
}

TEST_CASE("classify_prompt validates its inputs") {
    const auto& w = small_weights();
    const auto anchored = VisibilityPolicy::parse("speed+bos:2");
    const int bos = w.config.bos_id();

    CHECK_THROWS_AS((void)kvband::classify_prompt(w, anchored, std::vector<int>{}),
                    std::invalid_argument);
    // Anchored prompt must start with BoS.
    CHECK_THROWS_AS((void)kvband::classify_prompt(w, anchored, std::vector<int>{10, 11}),
                    std::invalid_argument);
    // Anchored prompt of length 1: BoS cannot double as the trigger.
    CHECK_THROWS_AS((void)kvband::classify_prompt(w, anchored, std::vector<int>{bos}),
                    std::invalid_argument);
    // Token id out of range.
    const auto plain = VisibilityPolicy::parse("speed:2");
    CHECK_THROWS_AS((void)kvband::classify_prompt(w, plain, std::vector<int>{w.config.vocab_size + 1}),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)kvband::classify_prompt(w, plain, std::vector<int>{-1}),
                    std::invalid_argument);
    // A 1-token anchor-free prompt is legal: the token is the trigger.
    const auto one = kvband::classify_prompt(w, plain, std::vector<int>{5});
    REQUIRE(one.size() == 1);
    CHECK(one[0].cls == TokenClass::DecodeCurrent);
}

TEST_CASE("synthetic prompts are deterministic and policy-shaped") {
    const ModelConfig c = small_config();
    const auto plain = VisibilityPolicy::parse("speed:2");
    const auto anchored = VisibilityPolicy::parse("speed+bos:2");

    const auto p1 = kvband::synthetic_prompt(c, plain, 12, 42);
    const auto p2 = kvband::synthetic_prompt(c, plain, 12, 42);
    CHECK(p1 == p2);
    CHECK(p1.size() == 12);
    for (int t : p1) {
        CHECK(t >= 0);
        CHECK(t < c.vocab_size);
    }
    const auto p3 = kvband::synthetic_prompt(c, plain, 12, 43);
    CHECK(p1 != p3);

    const auto a1 = kvband::synthetic_prompt(c, anchored, 12, 42);
    CHECK(a1.size() == 12);
    CHECK(a1[0] == c.bos_id());
}

TEST_CASE("generate returns max_new tokens with consistent steps and logits") {
    const auto& w = small_weights();
    const auto policy = VisibilityPolicy::parse("speed+bos:2");
    const auto prompt = kvband::synthetic_prompt(w.config, policy, 9, 5);

    const GenerationTrace trace = kvband::generate(w, policy, prompt, 6);
    CHECK(trace.policy == policy);
    CHECK(trace.config == w.config);
    CHECK(trace.prompt_tokens == prompt);
    REQUIRE(trace.generated_tokens.size() == 6);
    REQUIRE(trace.steps.size() == 6);
    REQUIRE(trace.step_logits.size() == 6);
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
        CAPTURE(i);
        CHECK(trace.steps[i].step == int(i) + 1);
        CHECK(trace.steps[i].token == trace.generated_tokens[i]);
        // Step i's token is the argmax of step i's logits.
        CHECK(kvband::argmax_token(trace.step_logits[i]) == trace.generated_tokens[i]);
        REQUIRE(trace.step_logits[i].size() == std::size_t(w.config.vocab_size));
    }
    // Trigger queries from the last prompt position; later steps advance by 1.
    CHECK(trace.steps[0].query_position == prompt.size() - 1);
    CHECK(trace.steps[1].query_position == prompt.size());
    CHECK(trace.steps[5].query_position == prompt.size() + 4);

    // Realized symbols: anchored prompt of 9 gives a=1, N=7, T=max_new.
    CHECK(trace.realized_a == 1);
    CHECK(trace.realized_n == 7);
    CHECK(trace.realized_t == 6);
    CHECK(trace.prefill_seconds > 0.0);
    CHECK(trace.decode_seconds > 0.0);
}

TEST_CASE("generate is deterministic") {
    const auto& w = small_weights();
    const auto policy = VisibilityPolicy::parse("selfonly+bos:3");
    const auto prompt = kvband::synthetic_prompt(w.config, policy, 7, 11);
    const GenerationTrace t1 = kvband::generate(w, policy, prompt, 4);
    const GenerationTrace t2 = kvband::generate(w, policy, prompt, 4);
    CHECK(t1.generated_tokens == t2.generated_tokens);
    REQUIRE(t1.step_logits.size() == t2.step_logits.size());
    for (std::size_t i = 0; i < t1.step_logits.size(); ++i) {
        CHECK(t1.step_logits[i] == t2.step_logits[i]);  // bit-identical
    }
}

TEST_CASE("posthoc flag changes nothing about the computation") {
    const auto& w = small_weights();
    const auto prompt = kvband::synthetic_prompt(w.config, VisibilityPolicy::parse("speed:2"), 8, 3);
    const GenerationTrace a = kvband::generate(w, VisibilityPolicy::parse("speed:2"), prompt, 4);
    const GenerationTrace b =
        kvband::generate(w, VisibilityPolicy::parse("speed:2:posthoc"), prompt, 4);
    CHECK(a.generated_tokens == b.generated_tokens);
    for (std::size_t i = 0; i < a.step_logits.size(); ++i) {
        CHECK(a.step_logits[i] == b.step_logits[i]);
    }
}

TEST_CASE("generate validates max_new and accepts a 1-token prompt") {
    const auto& w = small_weights();
    const auto plain = VisibilityPolicy::parse("speed:2");
    CHECK_THROWS_AS((void)kvband::generate(w, plain, std::vector<int>{5}, 0),
                    std::invalid_argument);
    const GenerationTrace t = kvband::generate(w, plain, std::vector<int>{5}, 3);
    CHECK(t.generated_tokens.size() == 3);
    CHECK(t.realized_n == 0);
    CHECK(t.realized_a == 0);
    CHECK(t.realized_t == 3);
}

TEST_CASE("capture shapes reflect the band structure") {
    const auto& w = small_weights();  // L = 4
    const auto policy = VisibilityPolicy::parse("speed+bos:2");
    const auto prompt = kvband::synthetic_prompt(w.config, policy, 6, 9);
    CaptureOptions capture;
    capture.attn_rows = true;
    capture.hidden_states = true;

    const GenerationTrace trace = kvband::generate(w, policy, prompt, 3);
    REQUIRE(trace.steps.size() == 3);
    const auto& trigger = trace.steps[0];
    REQUIRE(trigger.attn_keys.empty());  // capture off -> empty

    const GenerationTrace traced = kvband::generate(w, policy, prompt, 3, capture);
    const auto& t0 = traced.steps[0];
    REQUIRE(t0.attn_keys.size() == 4);
    REQUIRE(t0.attn_weights.size() == 4);
    REQUIRE(t0.hidden.size() == 4);
    // Trigger at position 5 of a 6-token prompt: in the lower band every
    // prompt position is a key; above the cutoff only anchor + self remain.
    CHECK(t0.attn_keys[0].size() == 6);
    CHECK(t0.attn_keys[1].size() == 6);
    CHECK(t0.attn_keys[2].size() == 2);
    CHECK(t0.attn_keys[3].size() == 2);
    CHECK(t0.attn_keys[2] == std::vector<std::size_t>{0, 5});
    for (int l = 0; l < 4; ++l) {
        CAPTURE(l);
        REQUIRE(t0.attn_weights[l].size() == t0.attn_keys[l].size());
        double mass = 0.0;
        for (float v : t0.attn_weights[l]) mass += v;
        CHECK(mass == doctest::Approx(1.0).epsilon(1e-5));
        CHECK(t0.hidden[l].size() == std::size_t(w.config.d_model));
    }
    // Decode step 2 queries position 6; its upper-band keys are anchor,
    // trigger (decode history), and itself.
    const auto& t1 = traced.steps[1];
    CHECK(t1.attn_keys[3] == std::vector<std::size_t>{0, 5, 6});
    // Captures never change the computation.
    CHECK(traced.generated_tokens == trace.generated_tokens);
}

TEST_CASE("decode_step validates cache/history consistency") {
    const auto& w = small_weights();
    const auto policy = VisibilityPolicy::parse("speed:2");
    const auto prompt = kvband::synthetic_prompt(w.config, policy, 5, 21);
    auto pre = kvband::prefill(w, policy, prompt);
    auto history = pre.history;

    // Forwarding at an already-cached position violates append ordering.
    CHECK_THROWS_AS((void)kvband::decode_step(w, policy, pre.cache, history, 3,
                                              prompt.size() - 1),
                    std::invalid_argument);
    // The correct next position works.
    auto ok = kvband::decode_step(w, policy, pre.cache, history, 3, prompt.size());
    CHECK(ok.step_logits.size() == std::size_t(w.config.vocab_size));
    CHECK(history.size() == prompt.size() + 1);
    CHECK(history.back().cls == TokenClass::DecodeHistory);
}

TEST_CASE("engine equals the masked full-depth reference on spot cases") {
    const ModelConfig c = small_config();
    const char* const policies[] = {"full", "speed:2", "speed+bos:3", "selfonly:1",
                                    "selfonly+bos:2"};
    for (const char* const text : policies) {
        CAPTURE(text);
        const auto policy = VisibilityPolicy::parse(text);
        const auto outcome = kvband::run_equivalence_trial(c, policy, 11, 6, 17);
        CHECK(outcome.tokens_match);
        CHECK(outcome.max_logit_gap <= 1e-4f);
    }
}

TEST_CASE("reference_generate agrees with generate exactly on a direct run") {
    const auto& w = small_weights();
    const auto policy = VisibilityPolicy::parse("speed+bos:2");
    const auto prompt = kvband::synthetic_prompt(w.config, policy, 8, 33);
    const GenerationTrace engine = kvband::generate(w, policy, prompt, 5);
    const GenerationTrace oracle = kvband::reference_generate(w, policy, prompt, 5);
    CHECK(engine.generated_tokens == oracle.generated_tokens);
    REQUIRE(engine.step_logits.size() == oracle.step_logits.size());
    for (std::size_t i = 0; i < engine.step_logits.size(); ++i) {
        CAPTURE(i);
        float gap = 0.0f;
        for (std::size_t v = 0; v < engine.step_logits[i].size(); ++v) {
            gap = std::max(gap, std::abs(engine.step_logits[i][v] - oracle.step_logits[i][v]));
        }
        CHECK(gap <= 1e-4f);
    }
}

TEST_CASE("trace JSONL round trips") {
    const auto& w = small_weights();
    const auto policy = VisibilityPolicy::parse("speed+bos:2");
    const auto prompt = kvband::synthetic_prompt(w.config, policy, 6, 5);
    CaptureOptions capture;
    capture.attn_rows = true;
    capture.hidden_states = true;
    const GenerationTrace trace = kvband::generate(w, policy, prompt, 3, capture);

    std::stringstream buf;
    kvband::write_trace_jsonl(trace, buf);
    const GenerationTrace back = kvband::read_trace_jsonl(buf);

    CHECK(back.config == trace.config);
    CHECK(back.policy == trace.policy);
    CHECK(back.prompt_tokens == trace.prompt_tokens);
    CHECK(back.generated_tokens == trace.generated_tokens);
    CHECK(back.realized_n == trace.realized_n);
    CHECK(back.realized_a == trace.realized_a);
    CHECK(back.realized_t == trace.realized_t);
    REQUIRE(back.steps.size() == trace.steps.size());
    REQUIRE(back.step_logits.size() == trace.step_logits.size());
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
        CAPTURE(i);
        CHECK(back.steps[i].step == trace.steps[i].step);
        CHECK(back.steps[i].token == trace.steps[i].token);
        CHECK(back.steps[i].query_position == trace.steps[i].query_position);
        CHECK(back.steps[i].attn_keys == trace.steps[i].attn_keys);
        REQUIRE(back.steps[i].attn_weights.size() == trace.steps[i].attn_weights.size());
        for (std::size_t l = 0; l < trace.steps[i].attn_weights.size(); ++l) {
            for (std::size_t k = 0; k < trace.steps[i].attn_weights[l].size(); ++k) {
                CHECK(back.steps[i].attn_weights[l][k] ==
                      doctest::Approx(trace.steps[i].attn_weights[l][k]).epsilon(1e-6));
            }
        }
        for (std::size_t v = 0; v < trace.step_logits[i].size(); ++v) {
            CHECK(back.step_logits[i][v] ==
                  doctest::Approx(trace.step_logits[i][v]).epsilon(1e-6));
        }
    }
}

TEST_CASE("read_trace_jsonl rejects malformed input") {
    SUBCASE("empty stream") {
        std::stringstream buf;
        CHECK_THROWS_AS((void)kvband::read_trace_jsonl(buf), std::invalid_argument);
    }
    SUBCASE("first record is not meta") {
        std::stringstream buf;
        buf << R"({"type":"step","step":1,"token":3,"position":4,"logits":[0.0]})"
            << "\n";
        CHECK_THROWS_AS((void)kvband::read_trace_jsonl(buf), std::invalid_argument);
    }
    SUBCASE("broken JSON line") {
        std::stringstream buf;
        buf << "{not json}\n";
        CHECK_THROWS((void)kvband::read_trace_jsonl(buf));
    }
}

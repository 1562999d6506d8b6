// kvband CLI: generate / bench / cost / diagnose / detect-loops / verify.
//
// Exit codes: 0 success; 2 configuration error (bad flags, bad config file,
// invalid parameter combinations); 3 verification failure; 4 I/O error.
//
// KVBAND_LOG: set to any non-empty value to stream progress to stderr.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kvband/bench.hpp"
#include "kvband/cost_model.hpp"
#include "kvband/diagnostics.hpp"
#include "kvband/engine.hpp"
#include "kvband/loop_detector.hpp"
#include "kvband/verify.hpp"

namespace {

using nlohmann::json;
using namespace kvband;

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kVerifyFailure = 3;
constexpr int kIoError = 4;

std::ostream* log_stream() {
    const char* value = std::getenv("KVBAND_LOG");
    return (value != nullptr && *value != '\0') ? &std::cerr : nullptr;
}

std::string dump_json(const json& j) {
    // Token ids may decode to non-UTF-8 byte strings; replace rather than throw.
    return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

// --config files carry a partial model description plus optional defaults:
//   {"model": {"n_layers": 8, ...}, "policy": "speed:6"}
struct FileDefaults {
    ModelConfig model;
    std::optional<std::string> policy;
};

FileDefaults load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    json j = json::parse(in);
    FileDefaults defaults;
    if (j.contains("model")) {
        const json& m = j.at("model");
        ModelConfig& c = defaults.model;
        c.n_layers = m.value("n_layers", c.n_layers);
        c.d_model = m.value("d_model", c.d_model);
        c.n_heads = m.value("n_heads", c.n_heads);
        c.n_kv_heads = m.value("n_kv_heads", c.n_kv_heads);
        c.d_head = m.value("d_head", c.d_head);
        c.d_ff = m.value("d_ff", c.d_ff);
        c.vocab_size = m.value("vocab_size", c.vocab_size);
        c.theta_base = m.value("theta_base", c.theta_base);
        c.init_seed = m.value("init_seed", c.init_seed);
    }
    if (j.contains("policy")) defaults.policy = j.at("policy").get<std::string>();
    return defaults;
}

// Flags appear before the subcommand parse, so the config file (if any) is
// located with a pre-scan and its values become the flag defaults.
std::optional<std::string> prescan_config_path(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string_view arg = argv[i];
        if (arg == "--config" && i + 1 < argc) return std::string(argv[i + 1]);
        if (arg.starts_with("--config=")) return std::string(arg.substr(9));
    }
    return std::nullopt;
}

void attach_model_flags(CLI::App* cmd, ModelConfig& cfg) {
    cmd->add_option("--layers", cfg.n_layers, "Model layers")->capture_default_str();
    cmd->add_option("--d-model", cfg.d_model, "Residual width")->capture_default_str();
    cmd->add_option("--heads", cfg.n_heads, "Query heads")->capture_default_str();
    cmd->add_option("--kv-heads", cfg.n_kv_heads, "KV heads (grouped-query)")
        ->capture_default_str();
    cmd->add_option("--d-head", cfg.d_head, "Per-head width")->capture_default_str();
    cmd->add_option("--d-ff", cfg.d_ff, "MLP hidden width")->capture_default_str();
    cmd->add_option("--vocab", cfg.vocab_size, "Vocabulary size (BoS uses the next id)")
        ->capture_default_str();
    cmd->add_option("--init-seed", cfg.init_seed, "Weight init seed")->capture_default_str();
}

struct PromptOptions {
    std::string text;
    std::size_t synthetic_len{64};
    std::uint64_t prompt_seed{123};
};

void attach_prompt_flags(CLI::App* cmd, PromptOptions& opts) {
    cmd->add_option("--prompt", opts.text,
                    "Literal prompt text (byte tokens; needs vocab >= 256). Under an anchored "
                    "policy the BoS token is prepended automatically");
    cmd->add_option("--prompt-len", opts.synthetic_len,
                    "Synthetic prompt length used when --prompt is absent")
        ->capture_default_str();
    cmd->add_option("--prompt-seed", opts.prompt_seed, "Synthetic prompt seed")
        ->capture_default_str();
}

std::vector<int> build_prompt(const ModelConfig& cfg, const VisibilityPolicy& policy,
                              const PromptOptions& opts) {
    if (opts.text.empty()) {
        return synthetic_prompt(cfg, policy, opts.synthetic_len, opts.prompt_seed);
    }
    if (cfg.vocab_size < 256) {
        throw std::invalid_argument("text prompts need vocab_size >= 256 (byte tokenizer)");
    }
    std::vector<int> tokens;
    if (policy.anchor_bos) tokens.push_back(cfg.bos_id());
    for (const char ch : opts.text) tokens.push_back(static_cast<unsigned char>(ch));
    return tokens;
}

json trace_stats_json(const GenerationTrace& trace, const ModelConfig& cfg) {
    CostInputs c;
    c.L = cfg.n_layers;
    c.K = trace.policy.effective_cutoff(cfg.n_layers);
    c.N = trace.realized_n;
    c.a = trace.realized_a;
    c.T = trace.realized_t;
    c.n_kv = cfg.n_kv_heads;
    c.d_head = cfg.d_head;
    c.b = 2;
    const int max_new = static_cast<int>(trace.generated_tokens.size());
    json out{{"policy", trace.policy.to_string()},
             {"prompt_len", trace.prompt_tokens.size()},
             {"max_new", max_new},
             {"tokens", trace.generated_tokens},
             {"ttft_ms", trace.prefill_seconds * 1e3},
             {"tpot_ms", trace.decode_seconds * 1e3 / max_new},
             {"kv_bytes", bytes_speed(c)},
             {"realized", {{"n", c.N}, {"a", c.a}, {"t", c.T}}}};
    bool text_safe = true;
    for (const int tok : trace.generated_tokens) text_safe = text_safe && tok >= 0 && tok < 256;
    if (text_safe) {
        std::string text;
        for (const int tok : trace.generated_tokens) text.push_back(static_cast<char>(tok));
        out["text"] = text;
    }
    return out;
}

json masses_json(const LayerDiagnostics& l) {
    json j{{"user", l.masses.user},
           {"bos", l.masses.bos},
           {"decode", l.masses.decode},
           {"other", l.masses.other}};
    return j;
}

template <typename T>
json opt_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

json diagnostics_json(const TraceDiagnostics& diag) {
    json layers = json::array();
    for (std::size_t i = 0; i < diag.layers.size(); ++i) {
        const LayerDiagnostics& l = diag.layers[i];
        layers.push_back({{"layer", i + 1},
                          {"masses", masses_json(l)},
                          {"prompt_entropy", opt_json(l.prompt_entropy)},
                          {"curvature", opt_json(l.curvature)},
                          {"straightening", opt_json(l.straightening)}});
    }
    const PeakSummary& p = diag.peaks;
    json peaks{{"prompt_peak_layer", opt_json(p.prompt_peak_layer)},
               {"bos_peak_layer", opt_json(p.bos_peak_layer)},
               {"decode_peak_layer", opt_json(p.decode_peak_layer)},
               {"entropy_min_layer", opt_json(p.entropy_min_layer)},
               {"straightening_peak_layer", opt_json(p.straightening_peak_layer)},
               {"entropy_minus_straightening", opt_json(p.entropy_minus_straightening)},
               {"straightening_entropy_corr", opt_json(p.straightening_entropy_corr)}};
    return json{{"layers", layers}, {"peaks", peaks}};
}

json loop_report_json(const LoopReport& r) {
    return json{{"has_loop", r.has_loop},
                {"unit_len", r.unit_len},
                {"repeats", r.repeats},
                {"loop_tokens", r.loop_tokens},
                {"trailing", r.trailing}};
}

std::vector<std::size_t> parse_len_list(const std::string& text) {
    std::vector<std::size_t> lens;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) lens.push_back(std::stoull(item));
    }
    if (lens.empty()) throw std::invalid_argument("empty length list '" + text + "'");
    return lens;
}

std::vector<std::string> parse_string_list(const std::string& text) {
    std::vector<std::string> items;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) items.push_back(item);
    }
    if (items.empty()) throw std::invalid_argument("empty list '" + text + "'");
    return items;
}

double round1(double v) { return round_decimals(v, 1); }
double round3(double v) { return round_decimals(v, 3); }

// The published-preset sweep: active-KV GiB and estimated FLOPs with
// reductions against full attention. GiB reductions follow the table's
// rounded-GiB convention.
void print_paper_preset(std::ostream& out) {
    out << "table,prompt_len,policy,value,reduction_pct\n";
    for (const std::uint64_t len : kReferenceSweepLens) {
        const double full_gib = round3(to_gib(bytes_full(reference_preset(len, 32))));
        out << "active_kv_gib," << len << ",full," << std::fixed << std::setprecision(3)
            << full_gib << "," << std::setprecision(1) << 0.0 << "\n";
        for (const int cutoff : kReferenceSweepCutoffs) {
            const double gib = round3(to_gib(bytes_speed(reference_preset(len, cutoff))));
            const double pct = round1(100.0 * (1.0 - gib / full_gib));
            out << "active_kv_gib," << len << ",speed+bos:" << cutoff << ","
                << std::setprecision(3) << gib << "," << std::setprecision(1) << pct << "\n";
        }
    }
    for (const std::uint64_t len : kReferenceSweepLens) {
        const double full_tf = round3(flops_estimate(len, 32) / 1e12);
        out << "flops_tf," << len << ",full," << std::fixed << std::setprecision(3) << full_tf
            << "," << std::setprecision(1) << 0.0 << "\n";
        for (const int cutoff : kReferenceSweepCutoffs) {
            const double tf = round3(flops_estimate(len, cutoff) / 1e12);
            const double pct =
                round1(100.0 * (1.0 - flops_estimate(len, cutoff) / flops_estimate(len, 32)));
            out << "flops_tf," << len << ",speed+bos:" << cutoff << "," << std::setprecision(3)
                << tf << "," << std::setprecision(1) << pct << "\n";
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "kvband: a banded KV-visibility inference laboratory.\n"
        "Exit codes: 0 ok, 2 configuration error, 3 verification failure, 4 I/O error."};
    app.require_subcommand(1);

    FileDefaults defaults;
    try {
        if (const auto path = prescan_config_path(argc, argv)) {
            defaults = load_config_file(*path);
        }
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return (dynamic_cast<const std::runtime_error*>(&e) != nullptr) ? kIoError : kConfigError;
    }
    std::string config_path_sink;
    app.add_option("--config", config_path_sink, "JSON config file with model defaults");

    const std::string default_policy = defaults.policy.value_or("full");

    // generate ---------------------------------------------------------------
    auto* generate_cmd = app.add_subcommand("generate", "Greedy generation under a policy");
    ModelConfig gen_model = defaults.model;
    PromptOptions gen_prompt;
    std::string gen_policy = default_policy;
    int gen_max_new = 32;
    std::string gen_trace_path;
    bool gen_capture = false;
    attach_model_flags(generate_cmd, gen_model);
    attach_prompt_flags(generate_cmd, gen_prompt);
    generate_cmd->add_option("--policy", gen_policy, "Policy string, e.g. full | speed:6")
        ->capture_default_str();
    generate_cmd->add_option("--max-new", gen_max_new, "Tokens to generate")
        ->capture_default_str();
    generate_cmd->add_option("--trace", gen_trace_path, "Write a JSONL trace to this path");
    generate_cmd->add_flag("--capture", gen_capture,
                           "Capture attention rows and hidden states into the trace");

    // bench ------------------------------------------------------------------
    auto* bench_cmd = app.add_subcommand("bench", "TTFT/TPOT sweep with a full-attention baseline");
    ModelConfig bench_model = defaults.model;
    std::string bench_lens = "1024,2048,4096";
    std::string bench_policies = "full,speed:6,speed:4";
    BenchConfig bench_config;
    std::string bench_csv_path, bench_json_path;
    attach_model_flags(bench_cmd, bench_model);
    bench_cmd->add_option("--lens", bench_lens, "Comma-separated prompt lengths")
        ->capture_default_str();
    bench_cmd->add_option("--policies", bench_policies, "Comma-separated policy strings")
        ->capture_default_str();
    bench_cmd->add_option("--max-new", bench_config.max_new, "Tokens per run")
        ->capture_default_str();
    bench_cmd->add_option("--repeats", bench_config.repeats, "Measured repeats per cell")
        ->capture_default_str();
    bench_cmd->add_option("--warmup", bench_config.warmup, "Discarded warm-up runs per cell")
        ->capture_default_str();
    bench_cmd->add_option("--prompt-seed", bench_config.prompt_seed, "Synthetic prompt seed")
        ->capture_default_str();
    bench_cmd->add_option("--csv", bench_csv_path, "Also write the CSV to this path");
    bench_cmd->add_option("--json", bench_json_path, "Also write a JSON report to this path");

    // cost -------------------------------------------------------------------
    auto* cost_cmd = app.add_subcommand("cost", "Closed-form KV/compute scaling tables");
    std::string cost_lens = "1024,2048,4096,8192,16384,32768,65536,131072";
    std::string cost_policies = "full,speed+bos:16,speed+bos:20,speed+bos:24,speed+bos:28";
    CostInputs cost_shape;  // preset defaults
    bool paper_preset = false;
    std::string cost_out_path;
    cost_cmd->add_option("--lens", cost_lens, "Comma-separated prompt lengths")
        ->capture_default_str();
    cost_cmd->add_option("--policies", cost_policies, "Comma-separated policy strings")
        ->capture_default_str();
    cost_cmd->add_option("--layers", cost_shape.L, "Model layers L")->capture_default_str();
    cost_cmd->add_option("--n-kv", cost_shape.n_kv, "KV heads")->capture_default_str();
    cost_cmd->add_option("--d-head", cost_shape.d_head, "Per-head width")->capture_default_str();
    cost_cmd->add_option("--bytes-per-scalar", cost_shape.b, "Accounting bytes per KV scalar")
        ->capture_default_str();
    cost_cmd->add_option("--decode-tokens", cost_shape.T, "Cached decode-phase tokens T")
        ->capture_default_str();
    cost_cmd->add_flag("--paper-preset", paper_preset,
                       "Print the published-preset sweep (active-KV GiB and FLOPs tables)");
    cost_cmd->add_option("--out", cost_out_path, "Also write the CSV to this path");

    // diagnose ---------------------------------------------------------------
    auto* diagnose_cmd =
        app.add_subcommand("diagnose", "Layer diagnostics over a captured generation");
    ModelConfig diag_model = defaults.model;
    PromptOptions diag_prompt;
    std::string diag_policy = default_policy;
    int diag_max_new = 64;
    std::string diag_trace_out, diag_trace_in;
    attach_model_flags(diagnose_cmd, diag_model);
    attach_prompt_flags(diagnose_cmd, diag_prompt);
    diagnose_cmd->add_option("--policy", diag_policy, "Policy string")->capture_default_str();
    diagnose_cmd->add_option("--max-new", diag_max_new, "Tokens to generate")
        ->capture_default_str();
    diagnose_cmd->add_option("--trace", diag_trace_out, "Also write the raw JSONL trace here");
    diagnose_cmd->add_option("--from-trace", diag_trace_in,
                             "Diagnose an existing JSONL trace instead of generating");

    // detect-loops -----------------------------------------------------------
    auto* loops_cmd = app.add_subcommand("detect-loops", "Repetition-loop detection");
    std::string loops_text, loops_file, loops_tokens;
    bool loops_per_line = false;
    loops_cmd->add_option("--text", loops_text, "Analyze this text (word tokens)");
    loops_cmd->add_option("--file", loops_file, "Analyze this file");
    loops_cmd->add_option("--tokens", loops_tokens, "Analyze comma-separated token ids");
    loops_cmd->add_flag("--per-line", loops_per_line,
                        "Treat each line of --file as one sequence and report the loop rate");

    // verify -----------------------------------------------------------------
    auto* verify_cmd = app.add_subcommand(
        "verify", "Oracle equivalence, mask enumeration, and cache accounting batteries");
    int verify_trials = 200;
    std::uint64_t verify_seed = 123;
    double verify_tolerance = 1e-4;
    verify_cmd->add_option("--trials", verify_trials, "Equivalence trials")
        ->capture_default_str();
    verify_cmd->add_option("--seed", verify_seed, "Battery seed")->capture_default_str();
    verify_cmd->add_option("--tolerance", verify_tolerance, "Max per-step logit gap")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfigError;
    }

    try {
        if (generate_cmd->parsed()) {
            const VisibilityPolicy policy = VisibilityPolicy::parse(gen_policy);
            const ModelWeights weights = init_weights(gen_model);
            const std::vector<int> prompt = build_prompt(gen_model, policy, gen_prompt);
            CaptureOptions capture;
            capture.attn_rows = gen_capture;
            capture.hidden_states = gen_capture;
            const GenerationTrace trace = generate(weights, policy, prompt, gen_max_new, capture);
            if (!gen_trace_path.empty()) {
                std::ofstream out(gen_trace_path);
                if (!out) throw std::runtime_error("cannot open trace path " + gen_trace_path);
                write_trace_jsonl(trace, out);
            }
            std::cout << dump_json(trace_stats_json(trace, gen_model)) << '\n';
            return kOk;
        }

        if (bench_cmd->parsed()) {
            bench_config.model = bench_model;
            bench_config.prompt_lens = parse_len_list(bench_lens);
            bench_config.policies = parse_string_list(bench_policies);
            const BenchReport report = run_bench(bench_config, log_stream());
            const std::string csv = bench_csv_string(report.rows);
            std::cout << csv;
            if (!bench_csv_path.empty()) write_bench_csv(report.rows, bench_csv_path);
            if (!bench_json_path.empty()) {
                std::ofstream out(bench_json_path);
                if (!out) throw std::runtime_error("cannot open json path " + bench_json_path);
                out << bench_report_json(report).dump(2) << '\n';
            }
            return kOk;
        }

        if (cost_cmd->parsed()) {
            std::ostringstream table;
            if (paper_preset) {
                print_paper_preset(table);
            } else {
                const std::vector<std::size_t> raw_lens_sz = [&] {
                    std::vector<std::size_t> v = parse_len_list(cost_lens);
                    return v;
                }();
                std::vector<std::uint64_t> lens(raw_lens_sz.begin(), raw_lens_sz.end());
                const std::vector<std::string> policies = parse_string_list(cost_policies);
                const std::vector<CostRow> rows = cost_table(cost_shape, lens, policies);
                table << cost_csv_string(rows);
            }
            std::cout << table.str();
            if (!cost_out_path.empty()) {
                std::ofstream out(cost_out_path);
                if (!out) throw std::runtime_error("cannot open output path " + cost_out_path);
                out << table.str();
            }
            return kOk;
        }

        if (diagnose_cmd->parsed()) {
            GenerationTrace trace;
            if (!diag_trace_in.empty()) {
                std::ifstream in(diag_trace_in);
                if (!in) throw std::runtime_error("cannot open trace " + diag_trace_in);
                trace = read_trace_jsonl(in);
            } else {
                const VisibilityPolicy policy = VisibilityPolicy::parse(diag_policy);
                const ModelWeights weights = init_weights(diag_model);
                const std::vector<int> prompt = build_prompt(diag_model, policy, diag_prompt);
                trace = generate(weights, policy, prompt, diag_max_new,
                                 CaptureOptions{true, true});
            }
            if (!diag_trace_out.empty()) {
                std::ofstream out(diag_trace_out);
                if (!out) throw std::runtime_error("cannot open trace path " + diag_trace_out);
                write_trace_jsonl(trace, out);
            }
            const TraceDiagnostics diag = summarize_trace(trace, span_map_for(trace));
            std::cout << dump_json(diagnostics_json(diag)) << '\n';
            return kOk;
        }

        if (loops_cmd->parsed()) {
            const int sources = (!loops_text.empty() ? 1 : 0) + (!loops_file.empty() ? 1 : 0) +
                                (!loops_tokens.empty() ? 1 : 0);
            if (sources != 1) {
                throw std::invalid_argument(
                    "detect-loops needs exactly one of --text, --file, --tokens");
            }
            if (loops_per_line && loops_file.empty()) {
                throw std::invalid_argument("--per-line requires --file");
            }
            if (!loops_tokens.empty()) {
                std::vector<int> ids;
                for (const std::string& item : parse_string_list(loops_tokens)) {
                    ids.push_back(std::stoi(item));
                }
                std::cout << dump_json(loop_report_json(detect_loop(ids))) << '\n';
                return kOk;
            }
            if (!loops_text.empty()) {
                std::cout << dump_json(loop_report_json(detect_loop_text(loops_text))) << '\n';
                return kOk;
            }
            std::ifstream in(loops_file);
            if (!in) throw std::runtime_error("cannot open file " + loops_file);
            if (!loops_per_line) {
                std::stringstream buffer;
                buffer << in.rdbuf();
                std::cout << dump_json(loop_report_json(detect_loop_text(buffer.str()))) << '\n';
                return kOk;
            }
            LoopStats stats;
            std::string line;
            while (std::getline(in, line)) {
                if (!line.empty()) stats.add(detect_loop_text(line));
            }
            std::cout << dump_json(json{{"sequences", stats.sequences},
                                        {"loops", stats.loops},
                                        {"loop_rate_pct", stats.loop_rate_pct()}})
                      << '\n';
            return kOk;
        }

        if (verify_cmd->parsed()) {
            std::ostream& out = std::cout;
            const BatterySummary equivalence = run_equivalence_battery(
                verify_trials, verify_seed, static_cast<float>(verify_tolerance), &out);
            const MaskEnumerationSummary masks = run_mask_enumeration(&out);

            int audit_failures = 0;
            int audits = 0;
            ModelConfig audit_model;
            audit_model.n_layers = 6;
            audit_model.d_model = 32;
            audit_model.n_heads = 4;
            audit_model.n_kv_heads = 2;
            audit_model.d_head = 8;
            audit_model.d_ff = 96;
            audit_model.vocab_size = 61;
            for (const char* const policy_text :
                 {"full", "speed:2", "speed+bos:3", "selfonly:1", "selfonly+bos:4"}) {
                const VisibilityPolicy policy = VisibilityPolicy::parse(policy_text);
                for (const std::size_t prompt_len : {std::size_t{2}, std::size_t{17}}) {
                    for (const int max_new : {1, 9}) {
                        const CountingAudit audit =
                            run_counting_audit(audit_model, policy, prompt_len, max_new, 7);
                        ++audits;
                        if (!audit.passed()) {
                            ++audit_failures;
                            out << "counting FAIL: policy=" << policy_text
                                << " prompt_len=" << prompt_len << " max_new=" << max_new
                                << " bytes_used=" << audit.bytes_used
                                << " bytes_predicted=" << audit.bytes_predicted
                                << " body_above_cutoff=" << audit.body_entries_above_cutoff
                                << '\n';
                        }
                    }
                }
            }
            out << "counting audit: " << audits - audit_failures << '/' << audits
                << " runs matched the closed form\n";

            const bool ok = equivalence.passed() && masks.passed() && audit_failures == 0;
            out << (ok ? "verify: PASS" : "verify: FAIL") << '\n';
            return ok ? kOk : kVerifyFailure;
        }
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kConfigError;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::runtime_error& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kIoError;
    }
    return kConfigError;  // unreachable: a subcommand is required
}

#include "kvcomm/error.hpp"
#include "kvcomm/experiments.hpp"
#include "kvcomm/kernels.hpp"
#include "kvcomm/orchestrator.hpp"
#include "kvcomm/reports.hpp"
#include "kvcomm/weights.hpp"
#include "kvcomm/workload.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace kvcomm;

namespace {

constexpr int kExitParse = 2;
constexpr int kExitContract = 3;

const std::vector<std::string> kExperiments = {"proximity", "offset-proximity", "offset-variance", "approx-error"};

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool shadow_dense = false;
    bool dump_tensors = false;
    int threads = 0;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "workload config (JSON)")->required();
    cmd->add_option("--out", c.out, "output directory (default: config output_dir, else ./out)");
    cmd->add_option("--seed", c.seed, "seed override (beats KVCOMM_SEED and the config file)");
    cmd->add_flag("--shadow-dense", c.shadow_dense, "recompute reused turns densely and profile the error");
    cmd->add_flag("--dump-tensors", c.dump_tensors, "write binary anchor tensors next to the pool dump");
    cmd->add_option("--threads", c.threads, "worker threads; 1 runs sequentially")->check(CLI::NonNegativeNumber);
}

std::optional<std::uint64_t> env_seed() {
    const char* s = std::getenv("KVCOMM_SEED");
    if (s == nullptr || *s == '\0') return std::nullopt;
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used);
        if (used != std::string(s).size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ParseError(std::string("KVCOMM_SEED is not an unsigned integer: '") + s + "'");
    }
}

WorkloadConfig load(const Common& c) {
    WorkloadConfig cfg = load_workload(c.config);
    std::optional<std::uint64_t> seed = c.seed ? c.seed : env_seed();
    if (seed) {
        cfg.seed = *seed;
        cfg.model.seed = *seed;
    }
    if (c.threads > 0) kernels::set_num_threads(c.threads);
    return cfg;
}

fs::path out_dir(const Common& c, const WorkloadConfig& cfg) {
    if (!c.out.empty()) return c.out;
    if (!cfg.output_dir.empty()) return cfg.output_dir;
    return "out";
}

void require_agents(const WorkloadConfig& cfg) {
    if (cfg.agents.empty()) throw ParseError("config defines no agents");
}

int cmd_run(const Common& c) {
    WorkloadConfig cfg = load(c);
    require_agents(cfg);
    const fs::path dir = out_dir(c, cfg);
    const Model model(init_weights(cfg.model));
    OrchestratorOptions opts = OrchestratorOptions::from(cfg);
    opts.shadow_dense = c.shadow_dense;
    Orchestrator orch(model, cfg.graph(), opts);
    WorkloadResult result;
    for (const auto& r : cfg.resolved_requests()) {
        auto recs = orch.run_request(r);
        result.records.insert(result.records.end(), recs.begin(), recs.end());
    }
    result.memory = orch.memory();
    for (const auto& [name, p] : orch.pools()) {
        result.pool_sizes[name] = p.size();
        result.pool_high_water[name] = p.high_water();
    }
    const SavingsReport savings = savings_report(result.records, result.memory);
    const std::string config_json = workload_to_json(cfg);
    write_file(dir / "transcript.jsonl", transcript_jsonl(result.records));
    write_file(dir / "timings.jsonl", timings_jsonl(result.records));
    write_file(dir / "diagnostics.jsonl", diagnostics_jsonl(result.records));
    write_file(dir / "report.json", run_report_json(config_json, savings, result));
    write_file(dir / "pools.json", pool_dump_json(orch));
    if (c.shadow_dense) {
        const auto prof = approximation_error_profile(result.records);
        write_file(dir / "approx-error.csv", approx_error_csv(prof));
        write_file(dir / "approx-error.json", approx_error_json(prof, config_json));
    }
    if (c.dump_tensors) dump_pool_tensors(orch, dir / "tensors");

    std::cout << version_string() << "\n"
              << "gamma " << cfg.gamma << ", capacity " << cfg.capacity << ", seed " << cfg.seed << "\n"
              << "agent-turns " << savings.turns << ", reuse " << savings.reuse_turns << " (rate " << savings.reuse_rate
              << ")\n";
    for (const auto& a : savings.agents) {
        std::cout << "  " << a.agent << ": reuse " << a.reuse_turns << "/" << a.turns << ", dense tokens "
                  << a.dense_tokens << ", reused tokens " << a.reused_tokens << ", mean ttft " << a.mean_ttft_ms
                  << " ms\n";
    }
    std::cout << "memory " << savings.memory.store_bytes + savings.memory.pool_bytes << " bytes; wrote " << dir.string()
              << "\n";
    return 0;
}

std::vector<double> parse_values(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (item.empty() || used != item.size()) throw ParseError("bad sweep value '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw ParseError("sweep needs at least one value");
    return out;
}

int cmd_sweep(const Common& c, const std::string& param, const std::string& value_list) {
    WorkloadConfig cfg = load(c);
    require_agents(cfg);
    const std::vector<double> values = parse_values(value_list);
    if (param != "gamma" && param != "capacity") throw ParseError("sweep parameter must be 'gamma' or 'capacity'");
    const fs::path dir = out_dir(c, cfg);
    const Model model(init_weights(cfg.model));
    const auto requests = cfg.resolved_requests();
    std::vector<SweepRow> rows;
    for (double v : values) {
        OrchestratorOptions opts = OrchestratorOptions::from(cfg);
        if (param == "gamma") {
            if (!(v >= 0.0 && v <= 1.0)) throw ParseError("gamma values must lie in [0, 1]");
            opts.gamma = v;
        } else {
            if (v < 0.0 || v != static_cast<double>(static_cast<std::size_t>(v))) {
                throw ParseError("capacity values must be non-negative integers");
            }
            opts.capacity = static_cast<std::size_t>(v);
        }
        const WorkloadResult result = run_workload(model, cfg.graph(), requests, opts);
        rows.push_back({param, v, savings_report(result.records, result.memory)});
    }
    const std::string csv = sweep_csv(rows);
    write_file(dir / ("sweep-" + param + ".csv"), csv);
    write_file(dir / ("sweep-" + param + ".json"), sweep_json(rows, workload_to_json(cfg)));
    std::cout << csv;
    return 0;
}

int cmd_analyze(const Common& c, const std::string& experiment) {
    if (std::find(kExperiments.begin(), kExperiments.end(), experiment) == kExperiments.end()) {
        std::string names;
        for (const auto& n : kExperiments) names += (names.empty() ? "" : ", ") + n;
        throw ParseError("unknown experiment '" + experiment + "'; valid: " + names);
    }
    WorkloadConfig cfg = load(c);
    const fs::path dir = out_dir(c, cfg);
    const Model model(init_weights(cfg.model));
    const std::string config_json = workload_to_json(cfg);
    std::string csv, js;
    if (experiment == "proximity" || experiment == "offset-proximity") {
        const auto r = experiment == "proximity" ? kv_proximity_experiment(model, cfg.analysis, cfg.seed)
                                                 : offset_proximity_experiment(model, cfg.analysis, cfg.seed);
        csv = correlation_csv(r);
        js = correlation_json(r, config_json);
    } else if (experiment == "offset-variance") {
        const auto r = offset_variance_experiment(model, cfg.analysis, cfg.seed);
        csv = offset_variance_csv(r);
        js = offset_variance_json(r, config_json);
    } else {
        require_agents(cfg);
        OrchestratorOptions opts = OrchestratorOptions::from(cfg);
        opts.shadow_dense = true;
        const auto result = run_workload(model, cfg.graph(), cfg.resolved_requests(), opts);
        const auto prof = approximation_error_profile(result.records);
        csv = approx_error_csv(prof);
        js = approx_error_json(prof, config_json);
    }
    write_file(dir / (experiment + ".csv"), csv);
    write_file(dir / (experiment + ".json"), js);
    std::cout << csv;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Anchor-based KV-cache sharing for multi-agent inference on a toy RoPE transformer", "kvcomm"};
    app.set_version_flag("--version", version_string());
    app.require_subcommand(1);

    Common common;
    std::string param;
    std::string values;
    std::string experiment;

    auto* run = app.add_subcommand("run", "run a workload and write transcript, report and pool dump");
    add_common(run, common);
    auto* sweep = app.add_subcommand("sweep", "rerun one request stream over gamma or capacity values");
    add_common(sweep, common);
    sweep->add_option("--param", param, "gamma | capacity")->required();
    sweep->add_option("--values", values, "comma-separated values")->required();
    auto* analyze = app.add_subcommand("analyze", "run a measurement experiment");
    add_common(analyze, common);
    analyze->add_option("--experiment", experiment, "proximity | offset-proximity | offset-variance | approx-error")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitParse;
    }

    try {
        if (run->parsed()) return cmd_run(common);
        if (sweep->parsed()) return cmd_sweep(common, param, values);
        return cmd_analyze(common, experiment);
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitParse;
    } catch (const Error& e) {
        std::cerr << "contract violation: " << e.what() << "\n";
        return kExitContract;
    } catch (const std::exception& e) {
        std::cerr << "fatal: " << e.what() << "\n";
        return 1;
    }
}

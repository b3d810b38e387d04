#pragma once

#include "kvcomm/experiments.hpp"
#include "kvcomm/orchestrator.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace kvcomm {

const char* version_string();

struct AgentSavings {
    std::string agent;
    std::size_t turns = 0;
    std::size_t reuse_turns = 0;
    std::size_t prompt_tokens = 0;
    std::size_t dense_tokens = 0;
    std::size_t reused_tokens = 0;
    double mean_ttft_ms = 0.0;
    double mean_total_ms = 0.0;
};

struct SavingsReport {
    std::size_t turns = 0;
    std::size_t reuse_turns = 0;
    double reuse_rate = 0.0;   // Reuse-branch turns / agent-turns
    std::size_t prompt_tokens = 0;
    std::size_t dense_tokens = 0;
    std::size_t reused_tokens = 0;
    std::vector<AgentSavings> agents;  // in order of first appearance
    MemoryStats memory;
};

SavingsReport savings_report(const std::vector<AgentTurnRecord>& records, const MemoryStats& memory);

/// One JSON line per record with the deterministic fields only (no timings).
std::string transcript_jsonl(const std::vector<AgentTurnRecord>& records);
std::string timings_jsonl(const std::vector<AgentTurnRecord>& records);
/// Per-placeholder verdicts, entropies and thresholds.
std::string diagnostics_jsonl(const std::vector<AgentTurnRecord>& records);

/// Report JSON: tool version, resolved config, savings and pool sizes.
std::string run_report_json(const std::string& config_json, const SavingsReport& savings,
                            const WorkloadResult& result);

/// Anchors, lengths, access counts, offset coverage and bytes per pool,
/// plus the shared store entries and memory totals.
std::string pool_dump_json(const Orchestrator& orch);

/// Binary sidecars for every anchor base and offset ("KVF1"/"KVO1" headers,
/// little-endian). Returns the files written.
std::vector<std::filesystem::path> dump_pool_tensors(const Orchestrator& orch, const std::filesystem::path& dir);

std::string correlation_csv(const CorrelationReport& r);
std::string correlation_json(const CorrelationReport& r, const std::string& config_json);
std::string offset_variance_csv(const OffsetVarianceReport& r);
std::string offset_variance_json(const OffsetVarianceReport& r, const std::string& config_json);
std::string approx_error_csv(const ApproxErrorProfile& p);
std::string approx_error_json(const ApproxErrorProfile& p, const std::string& config_json);

struct SweepRow {
    std::string parameter;
    double value = 0.0;
    SavingsReport savings;
};

std::string sweep_csv(const std::vector<SweepRow>& rows);
std::string sweep_json(const std::vector<SweepRow>& rows, const std::string& config_json);

void write_file(const std::filesystem::path& path, const std::string& content);

} // namespace kvcomm

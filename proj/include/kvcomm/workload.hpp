#pragma once

#include "kvcomm/agent_graph.hpp"
#include "kvcomm/config.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kvcomm {

inline constexpr double kDefaultGamma = 0.3;
inline constexpr std::size_t kDefaultCapacity = 20;
inline constexpr std::size_t kDefaultMaxNewTokens = 32;

struct Request {
    std::string question;
    std::map<std::string, std::string> tool_outputs;  // agent id -> condition text

    bool operator==(const Request&) const = default;
};

/// Seeded GSM8K-style question stream: `clusters` word-problem skeletons,
/// each request drawn from one cluster with its two-digit numbers
/// re-drawn with probability `variation`. Numbers are always two digits so
/// questions within a cluster share one length.
struct GeneratorConfig {
    std::size_t count = 50;
    std::size_t clusters = 8;
    double variation = 0.5;
    std::optional<std::uint64_t> seed;
};

std::vector<Request> generate_requests(const GeneratorConfig& cfg, std::uint64_t seed);

struct AgentDecl {
    std::string id;
    std::string template_text;
    std::vector<std::string> upstream;
};

struct AnalysisConfig {
    std::size_t sample_tokens = 400;
    std::size_t pairs = 120;
    std::size_t bins = 3;
    std::size_t prefix_count = 10;
    std::size_t prefix_length = 32;
    std::size_t probe_length = 8;
    std::string pair_selection = "stratified";  // or "closest"
    std::vector<std::size_t> layers;  // empty = all
};

struct WorkloadConfig {
    ModelConfig model;
    std::vector<AgentDecl> agents;
    double gamma = kDefaultGamma;
    std::size_t capacity = kDefaultCapacity;
    std::uint64_t seed = kDefaultSeed;
    std::size_t max_new_tokens = kDefaultMaxNewTokens;
    std::size_t rounds = 1;
    std::string tool_default = "ok";
    bool anchor_engine = true;
    std::vector<Request> requests;
    std::optional<GeneratorConfig> generator;
    AnalysisConfig analysis;
    std::string output_dir;

    /// Explicit requests followed by generated ones.
    std::vector<Request> resolved_requests() const;

    AgentGraph graph() const;
};

/// Parses and validates a workload config; throws ParseError. The seed is
/// applied to the model config as well.
WorkloadConfig parse_workload(const std::string& json_text);
WorkloadConfig load_workload(const std::filesystem::path& path);

/// Canonical JSON of the resolved config (echoed into every report).
std::string workload_to_json(const WorkloadConfig& cfg, int indent = 2);

} // namespace kvcomm

#pragma once

#include "kvcomm/agent_graph.hpp"
#include "kvcomm/anchor.hpp"
#include "kvcomm/model.hpp"
#include "kvcomm/shared_store.hpp"
#include "kvcomm/workload.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace kvcomm {

enum class Branch { Reuse, DenseFallback };

const char* to_string(Branch b);

struct OrchestratorOptions {
    double gamma = kDefaultGamma;
    std::size_t capacity = kDefaultCapacity;
    std::size_t max_new_tokens = kDefaultMaxNewTokens;
    std::size_t rounds = 1;
    std::string tool_default = "ok";
    bool anchor_engine = true;   // false = plain dense pipeline, no store or pools
    bool shadow_dense = false;   // recompute every Reuse turn densely for error profiles

    static OrchestratorOptions from(const WorkloadConfig& cfg);
};

enum class SegmentSource { PrefixBase, Approximated, Dense };

const char* to_string(SegmentSource s);

struct SegmentRecord {
    SegmentKind kind = SegmentKind::Prefix;
    std::size_t slot = 0;
    std::string name;          // placeholder name, or p<slot> for prefixes
    std::size_t start = 0;
    std::size_t length = 0;
    SegmentSource source = SegmentSource::Dense;
};

struct PlaceholderDiagnostic {
    std::string name;
    std::size_t slot = 0;
    std::size_t length = 0;
    Verdict verdict = Verdict::NewAnchor;
    std::size_t matched = 0;
    double entropy = 0.0;
    double threshold = 0.0;
    std::string reason;
};

/// Mean per-position cosine similarity and l2 error against dense KV.
struct LayerError {
    double key_cos = 0.0;
    double value_cos = 0.0;
    double key_l2 = 0.0;
    double value_l2 = 0.0;
};

/// Reuse-turn KV compared against a dense prefill of the same prompt over
/// all positions after the system prompt. `full` is the served cache,
/// `plain` relabels bases without rotation or offsets, `nearest` uses the
/// closest anchor's placeholder offset only.
struct ShadowProfile {
    std::size_t positions = 0;
    std::vector<LayerError> full;
    std::vector<LayerError> plain;
    std::vector<LayerError> nearest;
};

struct TurnTimings {
    double ttft_ms = 0.0;    // turn start until first-token logits are ready
    double total_ms = 0.0;   // including decode and anchor bookkeeping
};

struct AgentTurnRecord {
    std::size_t request = 0;
    std::size_t round = 0;
    std::size_t turn = 0;
    std::string agent;
    Branch branch = Branch::DenseFallback;
    std::vector<TokenId> prompt;
    std::vector<SegmentRecord> segments;
    std::size_t dense_tokens = 0;
    std::size_t reused_tokens = 0;
    std::vector<TokenId> response;
    std::vector<PlaceholderDiagnostic> placeholders;
    std::optional<Verdict> response_verdict;
    TurnTimings timings;
    std::optional<ShadowProfile> shadow;
};

/// One round of one request: its inputs and the responses produced so far.
struct TurnState {
    std::size_t request = 0;
    std::size_t round = 0;
    std::size_t turn = 0;        // global, unique per (request, round)
    std::size_t first_turn = 0;  // global turn of round 0 of this request
    Request input;
    std::map<std::string, std::vector<TokenId>> responses;
    std::vector<std::map<std::string, std::vector<TokenId>>> earlier_rounds;
};

/// A template filled for one turn.
struct Instantiation {
    std::vector<TokenId> tokens;
    std::vector<SegmentSpan> spans;                  // p0, phi1, p1, ..., phin, pn
    std::vector<std::vector<TokenId>> samples;       // phi1..phin
    std::vector<std::optional<StorePath>> paths;     // store path per sample; none for empty history
};

struct DenseResult {
    std::vector<TokenId> response;
    KVCache prompt_cache;                 // KV of the instantiated prompt only
    std::vector<KVFragment> segments;     // slices per span
    double ttft_ms = 0.0;
};

struct MemoryStats {
    std::size_t store_bytes = 0;     // distinct fragments in the shared store
    std::size_t pool_bytes = 0;      // sum of Anchor::bytes over all pools
    std::size_t resident_bytes = 0;  // distinct fragments + embeddings + offsets
};

/// Drives agents over requests with anchor-based KV sharing.
class Orchestrator {
public:
    Orchestrator(const Model& model, AgentGraph graph, OrchestratorOptions options);

    /// Precomputes prefix bases: p0 alone, then every later prefix with p0 as
    /// its only context. Called by the constructor; idempotent.
    void init_system();

    Instantiation instantiate(const AgentSpec& agent, const TurnState& turn) const;

    /// Standalone position-0 prefill of every placeholder sample this agent
    /// reads that has no stored base yet.
    void ensure_placeholder_bases(const AgentSpec& agent, TurnState& turn);

    AgentTurnRecord run_turn(const AgentSpec& agent, TurnState& turn);

    DenseResult dense_generate(const Instantiation& inst) const;

    /// Runs every round of one request through the graph in topological order.
    std::vector<AgentTurnRecord> run_request(const Request& request);

    const Model& model() const { return model_; }
    const AgentGraph& graph() const { return graph_; }
    const OrchestratorOptions& options() const { return options_; }
    const SharedKVStore& store() const { return store_; }
    const std::map<std::string, AnchorPool>& pools() const { return pools_; }
    std::size_t base_prefills() const { return base_prefills_; }
    std::size_t requests_seen() const { return next_request_; }
    MemoryStats memory() const;

private:
    std::shared_ptr<const KVFragment> ensure_base(const StorePath& path, const std::vector<TokenId>& tokens);
    std::shared_ptr<const KVFragment> base_for(const Instantiation& inst, std::size_t slot) const;
    std::shared_ptr<const KVFragment> prefix_base(const std::string& agent, std::size_t slot) const;
    AnchorPool& pool(const std::string& name);
    const AnchorPool* find_pool(const std::string& name) const;
    void write_anchor_offsets(const AgentSpec& agent, const Instantiation& inst, const DenseResult& dense,
                              const std::vector<MatchResult>& matches);
    std::optional<Verdict> publish_response(const AgentSpec& agent, const TurnState& turn,
                                            const std::vector<TokenId>& response);
    ShadowProfile shadow_profile(const AgentSpec& agent, const Instantiation& inst, const KVCache& served,
                                 const std::vector<MatchResult>& matches) const;

    const Model& model_;
    AgentGraph graph_;
    OrchestratorOptions options_;
    SharedKVStore store_;
    std::map<std::string, AnchorPool> pools_;
    std::map<std::string, std::vector<std::vector<TokenId>>> prefix_tokens_;
    std::size_t base_prefills_ = 0;
    std::size_t next_request_ = 0;
    std::size_t next_turn_ = 0;
};

struct WorkloadResult {
    std::vector<AgentTurnRecord> records;
    MemoryStats memory;
    std::map<std::string, std::size_t> pool_sizes;
    std::map<std::string, std::size_t> pool_high_water;
};

WorkloadResult run_workload(const Model& model, const AgentGraph& graph, const std::vector<Request>& requests,
                            const OrchestratorOptions& options);

} // namespace kvcomm

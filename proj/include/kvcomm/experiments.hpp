#pragma once

#include "kvcomm/model.hpp"
#include "kvcomm/orchestrator.hpp"
#include "kvcomm/workload.hpp"

#include <optional>
#include <string>
#include <vector>

namespace kvcomm {

struct TokenPair {
    TokenId a = 0;
    TokenId b = 0;
    double embedding_distance = 0.0;
};

enum class PairSelection { Closest, Stratified };

/// Draws min(count, 256) distinct byte tokens.
std::vector<TokenId> sample_tokens(std::size_t count, std::uint64_t seed);

/// `length` random byte tokens, preceded by BOS when `with_bos`.
std::vector<TokenId> random_prefix(std::size_t length, bool with_bos, std::uint64_t seed);

/// All pairs of `tokens` ordered by embedding distance, then reduced to
/// `count` pairs: the closest ones, or evenly spaced quantiles of the
/// sorted list.
std::vector<TokenPair> select_pairs(const Model& model, const std::vector<TokenId>& tokens, std::size_t count,
                                    PairSelection selection);

struct BinSummary {
    std::string label;
    double embedding_lo = 0.0;
    double embedding_hi = 0.0;
    std::vector<double> key_mean;    // per reported layer
    std::vector<double> value_mean;
};

struct CorrelationReport {
    std::string experiment;
    std::vector<std::size_t> layers;
    std::vector<TokenPair> pairs;
    std::vector<std::optional<double>> key_rho;    // per reported layer; empty = undefined
    std::vector<std::optional<double>> value_rho;
    std::vector<bool> vanishing;                   // every distance below the geometry epsilon
    std::vector<BinSummary> bins;                  // near .. far
    std::vector<std::vector<double>> key_distance;   // [layer][pair]
    std::vector<std::vector<double>> value_distance;
};

/// KV distance between the two tokens of each pair, both placed right after
/// the same prefix.
CorrelationReport kv_proximity(const Model& model, const std::vector<TokenPair>& pairs,
                               const std::vector<TokenId>& prefix, std::size_t bins,
                               const std::vector<std::size_t>& layers);

/// Distance between the two tokens' offsets, each offset measured between
/// the token after `prefix_b` and after `prefix_a` (aligned to prefix_a's
/// position).
CorrelationReport offset_proximity(const Model& model, const std::vector<TokenPair>& pairs,
                                   const std::vector<TokenId>& prefix_a, const std::vector<TokenId>& prefix_b,
                                   std::size_t bins, const std::vector<std::size_t>& layers);

/// Config-driven wrappers: token sampling, pair selection and prefixes all
/// derive from `seed`.
CorrelationReport kv_proximity_experiment(const Model& model, const AnalysisConfig& cfg, std::uint64_t seed);
CorrelationReport offset_proximity_experiment(const Model& model, const AnalysisConfig& cfg, std::uint64_t seed);

struct LayerSpread {
    double mean = 0.0;
    double std = 0.0;
};

struct OffsetVarianceReport {
    std::vector<std::size_t> layers;
    std::size_t prefixes = 0;
    std::size_t probe_length = 0;
    std::vector<LayerSpread> dk_rotated;     // keys de-rotated to the base frame
    std::vector<LayerSpread> dk_unrotated;   // raw key difference
    std::vector<LayerSpread> dv;
};

/// Offsets of one probe sequence under each prefix against its standalone
/// base at position 0. Per layer, the mean per-position offset norm is taken
/// for each prefix; mean and std are then over prefixes.
OffsetVarianceReport offset_variance(const Model& model, const std::vector<TokenId>& probe,
                                     const std::vector<std::vector<TokenId>>& prefixes,
                                     const std::vector<std::size_t>& layers);

OffsetVarianceReport offset_variance_experiment(const Model& model, const AnalysisConfig& cfg, std::uint64_t seed);

struct ApproxErrorProfile {
    std::size_t reuse_turns = 0;
    std::size_t positions = 0;
    std::vector<LayerError> full;
    std::vector<LayerError> plain;
    std::vector<LayerError> nearest;
};

/// Position-weighted average of the shadow profiles of all Reuse turns.
ApproxErrorProfile approximation_error_profile(const std::vector<AgentTurnRecord>& records);

std::vector<std::size_t> resolve_layers(const std::vector<std::size_t>& requested, std::size_t num_layers);

} // namespace kvcomm

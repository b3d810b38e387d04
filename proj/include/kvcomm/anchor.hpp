#pragma once

#include "kvcomm/geometry.hpp"
#include "kvcomm/matrix.hpp"
#include "kvcomm/tokenizer.hpp"

#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kvcomm {

using AnchorId = std::uint64_t;

/// Owner of a stored offset: the consuming agent and the placeholder slot i
/// in that agent's template.
struct AgentSlot {
    std::string agent;
    std::size_t slot = 0;

    auto operator<=>(const AgentSlot&) const = default;
};

/// A previously seen placeholder sample with its standalone base KV and the
/// offsets measured when agents consumed it under their own contexts.
struct Anchor {
    AnchorId id = 0;
    std::vector<TokenId> tokens;
    Matrix embeddings;                         // L x D layer-1 embeddings
    std::shared_ptr<const KVFragment> base;    // standalone prefill at position 0
    std::map<AgentSlot, KVOffset> placeholder_offsets;
    std::map<AgentSlot, KVOffset> prefix_offsets;
    std::uint64_t access_count = 0;
    std::uint64_t insertion_index = 0;

    std::size_t length() const { return tokens.size(); }

    /// Both the placeholder and the following-prefix offset are present.
    bool has_offsets(const AgentSlot& owner) const {
        return placeholder_offsets.contains(owner) && prefix_offsets.contains(owner);
    }

    /// Tensor bytes: base KV, embeddings and every stored offset.
    std::size_t bytes() const;
};

/// Capacity-bounded anchors of one placeholder name. Many readers or one
/// writer; callers serialize mutation.
class AnchorPool {
public:
    AnchorPool(std::string name, std::size_t capacity);

    const std::string& name() const { return name_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return anchors_.size(); }
    bool empty() const { return anchors_.empty(); }
    std::span<const Anchor> anchors() const { return anchors_; }

    /// Assigns id and insertion index, appends, and prunes back to capacity.
    /// Eviction picks the minimum access_count among the older anchors, ties
    /// going to the earliest inserted; the anchor just added is never the
    /// victim unless capacity is zero. Returns the evicted id, if any.
    std::optional<AnchorId> insert(Anchor anchor);

    /// Increments access_count once per id; throws ContractViolation on an
    /// unknown id.
    void record_access(std::span<const AnchorId> ids);

    Anchor* find(AnchorId id);
    const Anchor* find(AnchorId id) const;
    Anchor* find_by_tokens(std::span<const TokenId> tokens);
    const Anchor* find_by_tokens(std::span<const TokenId> tokens) const;

    /// Longest anchor length; 0 for an empty pool.
    std::size_t max_length() const;
    std::size_t bytes() const;

    /// Largest size ever observed after an insert returned.
    std::size_t high_water() const { return high_water_; }

private:
    std::string name_;
    std::size_t capacity_;
    std::vector<Anchor> anchors_;
    AnchorId next_id_ = 0;
    std::uint64_t next_insertion_ = 0;
    std::size_t high_water_ = 0;
};

std::optional<AnchorId> insert_anchor(AnchorPool& pool, Anchor anchor);
void record_access(AnchorPool& pool, std::span<const AnchorId> ids);

/// Softmax weights of a sample against candidate anchors, embeddings aligned
/// from segment start and truncated to the sample's length.
struct AnchorWeights {
    std::size_t positions = 0;
    std::size_t anchors = 0;
    std::vector<double> per_position;  // positions x anchors; softmax of -||h_phi,i - h_psi,i||
    std::vector<double> scalar;        // softmax of -||h_phi - h_psi||_F over the whole segment
    std::vector<double> distance;      // the Frobenius distances behind `scalar`

    double at(std::size_t pos, std::size_t anchor) const { return per_position[pos * anchors + anchor]; }
};

AnchorWeights anchor_weights(const Matrix& sample, std::span<const Anchor* const> candidates);

double entropy(std::span<const double> weights);

enum class Verdict { Shareable, NewAnchor };

const char* to_string(Verdict v);

struct MatchResult {
    Verdict verdict = Verdict::NewAnchor;
    std::vector<AnchorId> matched;   // the qualifying set, in pool order
    AnchorWeights weights;
    double entropy = 0.0;
    double threshold = 0.0;
    std::string reason;              // why NewAnchor, for diagnostics
};

/// Anchor prediction. NewAnchor when gamma is 0 (sharing disabled), the pool
/// is empty, the sample is longer than every anchor, the sample is itself an
/// anchor still missing the querying owner's offsets, no anchor qualifies,
/// or the entropy of the scalar weights exceeds gamma * log|qualifying|.
/// Qualifying anchors are at least as long as the sample and, when `owner`
/// is given, hold both offsets for it.
MatchResult predict_shareability(std::span<const TokenId> tokens, const Matrix& sample, const AnchorPool& pool,
                                 double gamma, const std::optional<AgentSlot>& owner);

/// base + sum_psi w_(i,psi) * placeholder offset_psi per position, in the base
/// frame, then re-rotated to target_start.
KVFragment approximate_placeholder_kv(const KVFragment& base, const AnchorPool& pool, const MatchResult& match,
                                      const AgentSlot& owner, std::int64_t target_start, const Rope& rope);

/// prefix_base + sum_psi w_psi * prefix offset_psi, re-rotated to target_start.
KVFragment approximate_prefix_kv(const KVFragment& prefix_base, const AnchorPool& pool, const MatchResult& match,
                                 const AgentSlot& owner, std::int64_t target_start, const Rope& rope);

/// Offset of the closest anchor only (ablation; no contract beyond the shape).
KVFragment approximate_placeholder_nearest(const KVFragment& base, const AnchorPool& pool, const MatchResult& match,
                                           const AgentSlot& owner, std::int64_t target_start, const Rope& rope);

} // namespace kvcomm

#include "kvcomm/anchor.hpp"

#include "kvcomm/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kvcomm {
namespace {

std::vector<double> softmax_neg(std::span<const double> dist) {
    std::vector<double> w(dist.size());
    if (dist.empty()) return w;
    const double lo = *std::min_element(dist.begin(), dist.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < dist.size(); ++i) {
        w[i] = std::exp(-(dist[i] - lo));
        sum += w[i];
    }
    for (double& x : w) x /= sum;
    return w;
}

std::vector<const Anchor*> resolve(const AnchorPool& pool, std::span<const AnchorId> ids) {
    std::vector<const Anchor*> out;
    out.reserve(ids.size());
    for (AnchorId id : ids) {
        const Anchor* a = pool.find(id);
        if (a == nullptr) {
            throw ContractViolation("pool '" + pool.name() + "' has no anchor " + std::to_string(id));
        }
        out.push_back(a);
    }
    return out;
}

const KVOffset& offset_for(const Anchor& a, const std::map<AgentSlot, KVOffset>& offsets, const AgentSlot& owner,
                           const char* kind) {
    auto it = offsets.find(owner);
    if (it == offsets.end()) {
        throw ContractViolation(std::string("anchor ") + std::to_string(a.id) + " has no " + kind + " offset for agent " +
                                owner.agent + " slot " + std::to_string(owner.slot));
    }
    return it->second;
}

// Weighted sum of offsets, positions [0, length), per-position weights when
// `per_position` is set, otherwise the scalar weight of each anchor.
KVOffset blend(std::span<const KVOffset* const> offsets, const AnchorWeights& w, bool per_position,
               std::size_t length, std::int64_t base_start, std::size_t num_layers, std::size_t width) {
    KVOffset out = KVOffset::zeros(num_layers, width, length, base_start);
    for (std::size_t l = 0; l < num_layers; ++l) {
        for (std::size_t i = 0; i < length; ++i) {
            for (std::size_t j = 0; j < width; ++j) {
                const std::size_t idx = i * width + j;
                double k = 0.0;
                double v = 0.0;
                for (std::size_t a = 0; a < offsets.size(); ++a) {
                    const double weight = per_position ? w.at(i, a) : w.scalar[a];
                    k += weight * offsets[a]->dk[l][idx];
                    v += weight * offsets[a]->dv[l][idx];
                }
                out.dk[l][idx] = static_cast<float>(k);
                out.dv[l][idx] = static_cast<float>(v);
            }
        }
    }
    return out;
}

} // namespace

std::size_t Anchor::bytes() const {
    std::size_t total = embeddings.data.size() * sizeof(float);
    if (base) total += base->bytes();
    for (const auto& [_, o] : placeholder_offsets) total += o.bytes();
    for (const auto& [_, o] : prefix_offsets) total += o.bytes();
    return total;
}

AnchorPool::AnchorPool(std::string name, std::size_t capacity) : name_(std::move(name)), capacity_(capacity) {}

std::optional<AnchorId> AnchorPool::insert(Anchor anchor) {
    anchor.id = next_id_++;
    anchor.insertion_index = next_insertion_++;
    if (capacity_ == 0) return anchor.id;
    anchors_.push_back(std::move(anchor));
    std::optional<AnchorId> evicted;
    while (anchors_.size() > capacity_) {
        // The newest anchor (last) is exempt.
        auto victim = anchors_.begin();
        for (auto it = anchors_.begin(); it != anchors_.end() - 1; ++it) {
            if (it->access_count < victim->access_count ||
                (it->access_count == victim->access_count && it->insertion_index < victim->insertion_index)) {
                victim = it;
            }
        }
        evicted = victim->id;
        anchors_.erase(victim);
    }
    high_water_ = std::max(high_water_, anchors_.size());
    return evicted;
}

void AnchorPool::record_access(std::span<const AnchorId> ids) {
    for (AnchorId id : ids) {
        Anchor* a = find(id);
        if (a == nullptr) throw ContractViolation("record_access: pool '" + name_ + "' has no anchor " + std::to_string(id));
        ++a->access_count;
    }
}

Anchor* AnchorPool::find(AnchorId id) {
    auto it = std::find_if(anchors_.begin(), anchors_.end(), [&](const Anchor& a) { return a.id == id; });
    return it == anchors_.end() ? nullptr : &*it;
}

const Anchor* AnchorPool::find(AnchorId id) const { return const_cast<AnchorPool*>(this)->find(id); }

Anchor* AnchorPool::find_by_tokens(std::span<const TokenId> tokens) {
    auto it = std::find_if(anchors_.begin(), anchors_.end(), [&](const Anchor& a) {
        return std::equal(a.tokens.begin(), a.tokens.end(), tokens.begin(), tokens.end());
    });
    return it == anchors_.end() ? nullptr : &*it;
}

const Anchor* AnchorPool::find_by_tokens(std::span<const TokenId> tokens) const {
    return const_cast<AnchorPool*>(this)->find_by_tokens(tokens);
}

std::size_t AnchorPool::max_length() const {
    std::size_t m = 0;
    for (const auto& a : anchors_) m = std::max(m, a.length());
    return m;
}

std::size_t AnchorPool::bytes() const {
    std::size_t total = 0;
    for (const auto& a : anchors_) total += a.bytes();
    return total;
}

std::optional<AnchorId> insert_anchor(AnchorPool& pool, Anchor anchor) { return pool.insert(std::move(anchor)); }

void record_access(AnchorPool& pool, std::span<const AnchorId> ids) { pool.record_access(ids); }

AnchorWeights anchor_weights(const Matrix& sample, std::span<const Anchor* const> candidates) {
    if (candidates.empty()) throw ContractViolation("anchor_weights: no candidate anchors");
    const std::size_t len = sample.rows;
    const std::size_t m = candidates.size();
    AnchorWeights w;
    w.positions = len;
    w.anchors = m;
    w.per_position.resize(len * m);
    w.distance.assign(m, 0.0);

    std::vector<double> dist(len * m);
    for (std::size_t a = 0; a < m; ++a) {
        const Anchor& anchor = *candidates[a];
        if (anchor.length() < len) throw ContractViolation("anchor_weights: candidate shorter than the sample");
        if (anchor.embeddings.cols != sample.cols) throw ShapeError("anchor_weights: embedding width mismatch");
        double sq_total = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            auto x = sample.row(i);
            auto y = anchor.embeddings.row(i);
            double sq = 0.0;
            for (std::size_t j = 0; j < x.size(); ++j) {
                const double diff = static_cast<double>(x[j]) - y[j];
                sq += diff * diff;
            }
            dist[i * m + a] = std::sqrt(sq);
            sq_total += sq;
        }
        w.distance[a] = std::sqrt(sq_total);
    }
    for (std::size_t i = 0; i < len; ++i) {
        auto row = softmax_neg(std::span<const double>(dist.data() + i * m, m));
        std::copy(row.begin(), row.end(), w.per_position.begin() + static_cast<std::ptrdiff_t>(i * m));
    }
    w.scalar = softmax_neg(w.distance);
    return w;
}

double entropy(std::span<const double> weights) {
    double h = 0.0;
    for (double w : weights) {
        if (w > 0.0) h -= w * std::log(w);
    }
    return h;
}

const char* to_string(Verdict v) { return v == Verdict::Shareable ? "shareable" : "new_anchor"; }

MatchResult predict_shareability(std::span<const TokenId> tokens, const Matrix& sample, const AnchorPool& pool,
                                 double gamma, const std::optional<AgentSlot>& owner) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ContractViolation("gamma must lie in [0, 1]");
    if (sample.rows != tokens.size()) throw ShapeError("predict_shareability: embeddings do not match tokens");
    MatchResult r;
    if (gamma == 0.0) {
        r.reason = "sharing disabled (gamma = 0)";
        return r;
    }
    if (pool.empty()) {
        r.reason = "empty pool";
        return r;
    }
    if (tokens.size() > pool.max_length()) {
        r.reason = "longer than every anchor";
        return r;
    }
    if (owner) {
        const Anchor* same = pool.find_by_tokens(tokens);
        if (same != nullptr && !same->has_offsets(*owner)) {
            r.reason = "sample is an anchor awaiting this agent's offsets";
            return r;
        }
    }
    std::vector<const Anchor*> qualifying;
    for (const auto& a : pool.anchors()) {
        if (a.length() >= tokens.size() && (!owner || a.has_offsets(*owner))) qualifying.push_back(&a);
    }
    if (qualifying.empty()) {
        r.reason = "no anchor holds offsets for this agent";
        return r;
    }
    r.weights = anchor_weights(sample, qualifying);
    for (const Anchor* a : qualifying) r.matched.push_back(a->id);
    r.entropy = entropy(r.weights.scalar);
    r.threshold = gamma * std::log(static_cast<double>(qualifying.size()));
    if (r.entropy > r.threshold) {
        r.reason = "weight entropy above threshold";
        return r;
    }
    r.verdict = Verdict::Shareable;
    return r;
}

KVFragment approximate_placeholder_kv(const KVFragment& base, const AnchorPool& pool, const MatchResult& match,
                                      const AgentSlot& owner, std::int64_t target_start, const Rope& rope) {
    if (match.weights.positions != base.length || match.weights.anchors != match.matched.size()) {
        throw ShapeError("approximate_placeholder_kv: weights do not match the base fragment");
    }
    const auto anchors = resolve(pool, match.matched);
    std::vector<KVOffset> truncated;
    truncated.reserve(anchors.size());
    for (const Anchor* a : anchors) {
        const KVOffset& o = offset_for(*a, a->placeholder_offsets, owner, "placeholder");
        if (o.base_start != base.start) throw ShapeError("placeholder offset frame differs from the base fragment");
        truncated.push_back(o.truncated(base.length));
    }
    std::vector<const KVOffset*> ptrs;
    for (const auto& o : truncated) ptrs.push_back(&o);
    const KVOffset delta = blend(ptrs, match.weights, true, base.length, base.start, base.num_layers(), base.width);
    return apply_offset(base, delta, target_start, rope);
}

KVFragment approximate_prefix_kv(const KVFragment& prefix_base, const AnchorPool& pool, const MatchResult& match,
                                 const AgentSlot& owner, std::int64_t target_start, const Rope& rope) {
    if (match.weights.anchors != match.matched.size()) throw ShapeError("approximate_prefix_kv: weight count mismatch");
    const auto anchors = resolve(pool, match.matched);
    std::vector<const KVOffset*> ptrs;
    for (const Anchor* a : anchors) {
        const KVOffset& o = offset_for(*a, a->prefix_offsets, owner, "prefix");
        if (o.length != prefix_base.length) {
            throw ShapeError("prefix offset of anchor " + std::to_string(a->id) + " has length " + std::to_string(o.length) +
                             ", prefix segment has " + std::to_string(prefix_base.length));
        }
        if (o.base_start != prefix_base.start) throw ShapeError("prefix offset frame differs from the prefix base");
        ptrs.push_back(&o);
    }
    const KVOffset delta =
        blend(ptrs, match.weights, false, prefix_base.length, prefix_base.start, prefix_base.num_layers(), prefix_base.width);
    return apply_offset(prefix_base, delta, target_start, rope);
}

KVFragment approximate_placeholder_nearest(const KVFragment& base, const AnchorPool& pool, const MatchResult& match,
                                           const AgentSlot& owner, std::int64_t target_start, const Rope& rope) {
    if (match.matched.empty()) throw ContractViolation("nearest approximation without matched anchors");
    const auto best = static_cast<std::size_t>(
        std::min_element(match.weights.distance.begin(), match.weights.distance.end()) - match.weights.distance.begin());
    const Anchor* a = pool.find(match.matched[best]);
    if (a == nullptr) throw ContractViolation("nearest anchor vanished from pool");
    const KVOffset o = offset_for(*a, a->placeholder_offsets, owner, "placeholder").truncated(base.length);
    return apply_offset(base, o, target_start, rope);
}

} // namespace kvcomm

#include "kvcomm/experiments.hpp"

#include "kvcomm/error.hpp"
#include "kvcomm/random.hpp"
#include "kvcomm/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kvcomm {

namespace {

double l2(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double d = static_cast<double>(a[j]) - b[j];
        s += d * d;
    }
    return std::sqrt(s);
}

double norm(std::span<const float> a) {
    double s = 0.0;
    for (float v : a) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

PairSelection parse_selection(const std::string& s) {
    if (s == "closest") return PairSelection::Closest;
    if (s == "stratified") return PairSelection::Stratified;
    throw ParseError("unknown pair selection '" + s + "' (closest, stratified)");
}

// One KV row per token: the token placed right after `prefix`.
std::vector<KVFragment> token_kv(const Model& model, const std::vector<TokenId>& tokens,
                                 const std::vector<TokenId>& prefix) {
    const KVCache ctx = model.prefill(prefix, 0).segment;
    std::vector<KVFragment> out(tokens.size());
    const auto n = static_cast<std::int64_t>(tokens.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const TokenId t[] = {tokens[static_cast<std::size_t>(i)]};
        out[static_cast<std::size_t>(i)] = model.prefill(t, ctx.end(), &ctx).segment;
    }
    return out;
}

void fill_statistics(CorrelationReport& r, std::size_t bins) {
    std::vector<double> emb;
    for (const auto& p : r.pairs) emb.push_back(p.embedding_distance);
    const std::size_t n = r.pairs.size();
    const std::size_t nb = std::max<std::size_t>(1, bins);
    for (std::size_t li = 0; li < r.layers.size(); ++li) {
        r.key_rho.push_back(spearman(emb, r.key_distance[li]));
        r.value_rho.push_back(spearman(emb, r.value_distance[li]));
        const double top = std::max(*std::max_element(r.key_distance[li].begin(), r.key_distance[li].end()),
                                    *std::max_element(r.value_distance[li].begin(), r.value_distance[li].end()));
        r.vanishing.push_back(top <= kGeometryEps);
    }
    static const char* kLabels3[] = {"near", "mid", "far"};
    for (std::size_t b = 0; b < nb; ++b) {
        const std::size_t lo = b * n / nb, hi = (b + 1) * n / nb;
        BinSummary s;
        s.label = nb == 3 ? kLabels3[b] : "bin" + std::to_string(b);
        s.embedding_lo = r.pairs[lo].embedding_distance;
        s.embedding_hi = r.pairs[hi - 1].embedding_distance;
        for (std::size_t li = 0; li < r.layers.size(); ++li) {
            std::span<const double> k(r.key_distance[li].data() + lo, hi - lo);
            std::span<const double> v(r.value_distance[li].data() + lo, hi - lo);
            s.key_mean.push_back(mean(k));
            s.value_mean.push_back(mean(v));
        }
        r.bins.push_back(std::move(s));
    }
}

void check_pairs(const std::vector<TokenPair>& pairs, std::size_t bins) {
    if (bins == 0) throw ContractViolation("bin count must be >= 1");
    if (pairs.size() < 3 * bins) throw ContractViolation("need at least 3 x bins token pairs");
    for (std::size_t i = 1; i < pairs.size(); ++i) {
        if (pairs[i].embedding_distance < pairs[i - 1].embedding_distance) {
            throw ContractViolation("pairs must be ordered by embedding distance");
        }
    }
}

} // namespace

std::vector<std::size_t> resolve_layers(const std::vector<std::size_t>& requested, std::size_t num_layers) {
    if (requested.empty()) {
        std::vector<std::size_t> all(num_layers);
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    for (auto l : requested) {
        if (l >= num_layers) throw ContractViolation("layer " + std::to_string(l) + " beyond the model");
    }
    return requested;
}

std::vector<TokenId> sample_tokens(std::size_t count, std::uint64_t seed) {
    std::vector<TokenId> ids(256);
    std::iota(ids.begin(), ids.end(), 0);
    SplitMix64 rng(mix64(seed ^ fnv1a64("sample_tokens")));
    for (std::size_t i = ids.size() - 1; i > 0; --i) std::swap(ids[i], ids[rng.below(i + 1)]);
    ids.resize(std::min<std::size_t>(count, ids.size()));
    return ids;
}

std::vector<TokenId> random_prefix(std::size_t length, bool with_bos, std::uint64_t seed) {
    SplitMix64 rng(mix64(seed ^ fnv1a64("prefix")));
    std::vector<TokenId> out;
    if (with_bos) out.push_back(kBosToken);
    for (std::size_t i = 0; i < length; ++i) out.push_back(static_cast<TokenId>(rng.below(256)));
    return out;
}

std::vector<TokenPair> select_pairs(const Model& model, const std::vector<TokenId>& tokens, std::size_t count,
                                    PairSelection selection) {
    std::vector<TokenPair> all;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        for (std::size_t j = i + 1; j < tokens.size(); ++j) {
            all.push_back({tokens[i], tokens[j], l2(model.embedding(tokens[i]), model.embedding(tokens[j]))});
        }
    }
    std::stable_sort(all.begin(), all.end(),
                     [](const TokenPair& x, const TokenPair& y) { return x.embedding_distance < y.embedding_distance; });
    if (count >= all.size()) return all;
    if (selection == PairSelection::Closest) {
        all.resize(count);
        return all;
    }
    std::vector<TokenPair> out;
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t idx = count == 1 ? 0 : k * (all.size() - 1) / (count - 1);
        out.push_back(all[idx]);
    }
    return out;
}

CorrelationReport kv_proximity(const Model& model, const std::vector<TokenPair>& pairs,
                               const std::vector<TokenId>& prefix, std::size_t bins,
                               const std::vector<std::size_t>& layers) {
    check_pairs(pairs, bins);
    CorrelationReport r;
    r.experiment = "proximity";
    r.layers = resolve_layers(layers, model.config().num_layers);
    r.pairs = pairs;
    std::vector<TokenId> tokens;
    for (const auto& p : pairs) {
        tokens.push_back(p.a);
        tokens.push_back(p.b);
    }
    std::sort(tokens.begin(), tokens.end());
    tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
    const auto kv = token_kv(model, tokens, prefix);
    auto at = [&](TokenId t) -> const KVFragment& {
        return kv[static_cast<std::size_t>(std::lower_bound(tokens.begin(), tokens.end(), t) - tokens.begin())];
    };
    r.key_distance.assign(r.layers.size(), {});
    r.value_distance.assign(r.layers.size(), {});
    for (std::size_t li = 0; li < r.layers.size(); ++li) {
        const std::size_t l = r.layers[li];
        for (const auto& p : pairs) {
            r.key_distance[li].push_back(l2(at(p.a).key(l, 0), at(p.b).key(l, 0)));
            r.value_distance[li].push_back(l2(at(p.a).value(l, 0), at(p.b).value(l, 0)));
        }
    }
    fill_statistics(r, bins);
    return r;
}

CorrelationReport offset_proximity(const Model& model, const std::vector<TokenPair>& pairs,
                                   const std::vector<TokenId>& prefix_a, const std::vector<TokenId>& prefix_b,
                                   std::size_t bins, const std::vector<std::size_t>& layers) {
    check_pairs(pairs, bins);
    CorrelationReport r;
    r.experiment = "offset-proximity";
    r.layers = resolve_layers(layers, model.config().num_layers);
    r.pairs = pairs;
    std::vector<TokenId> tokens;
    for (const auto& p : pairs) {
        tokens.push_back(p.a);
        tokens.push_back(p.b);
    }
    std::sort(tokens.begin(), tokens.end());
    tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
    const auto kv_a = token_kv(model, tokens, prefix_a);
    const auto kv_b = token_kv(model, tokens, prefix_b);
    std::vector<KVOffset> offsets;
    for (std::size_t i = 0; i < tokens.size(); ++i) offsets.push_back(measure_offset(kv_b[i], kv_a[i], model.rope()));
    auto at = [&](TokenId t) -> const KVOffset& {
        return offsets[static_cast<std::size_t>(std::lower_bound(tokens.begin(), tokens.end(), t) - tokens.begin())];
    };
    const std::size_t w = model.config().model_dim;
    r.key_distance.assign(r.layers.size(), {});
    r.value_distance.assign(r.layers.size(), {});
    for (std::size_t li = 0; li < r.layers.size(); ++li) {
        const std::size_t l = r.layers[li];
        for (const auto& p : pairs) {
            const KVOffset& oa = at(p.a);
            const KVOffset& ob = at(p.b);
            r.key_distance[li].push_back(l2({oa.dk[l].data(), w}, {ob.dk[l].data(), w}));
            r.value_distance[li].push_back(l2({oa.dv[l].data(), w}, {ob.dv[l].data(), w}));
        }
    }
    fill_statistics(r, bins);
    return r;
}

CorrelationReport kv_proximity_experiment(const Model& model, const AnalysisConfig& cfg, std::uint64_t seed) {
    const auto tokens = sample_tokens(cfg.sample_tokens, seed);
    const auto pairs = select_pairs(model, tokens, cfg.pairs, parse_selection(cfg.pair_selection));
    return kv_proximity(model, pairs, random_prefix(cfg.prefix_length, true, seed), cfg.bins, cfg.layers);
}

CorrelationReport offset_proximity_experiment(const Model& model, const AnalysisConfig& cfg, std::uint64_t seed) {
    const auto tokens = sample_tokens(cfg.sample_tokens, seed);
    const auto pairs = select_pairs(model, tokens, cfg.pairs, parse_selection(cfg.pair_selection));
    const auto a = random_prefix(cfg.prefix_length, true, seed);
    const auto b = random_prefix(cfg.prefix_length + cfg.prefix_length / 2, true, mix64(seed + 1));
    return offset_proximity(model, pairs, a, b, cfg.bins, cfg.layers);
}

OffsetVarianceReport offset_variance(const Model& model, const std::vector<TokenId>& probe,
                                     const std::vector<std::vector<TokenId>>& prefixes,
                                     const std::vector<std::size_t>& layers) {
    if (prefixes.size() < 2) throw ContractViolation("offset variance needs at least two prefixes");
    if (probe.empty()) throw ContractViolation("offset variance needs a non-empty probe");
    OffsetVarianceReport r;
    r.layers = resolve_layers(layers, model.config().num_layers);
    r.prefixes = prefixes.size();
    r.probe_length = probe.size();
    const KVFragment base = model.prefill(probe, 0).segment;
    const std::size_t nl = r.layers.size();
    std::vector<std::vector<double>> rot(nl), unrot(nl), val(nl);
    std::vector<KVFragment> reals(prefixes.size());
    const auto np = static_cast<std::int64_t>(prefixes.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t j = 0; j < np; ++j) {
        const KVCache ctx = model.prefill(prefixes[static_cast<std::size_t>(j)], 0).segment;
        reals[static_cast<std::size_t>(j)] = model.prefill(probe, ctx.end(), &ctx).segment;
    }
    for (const auto& real : reals) {
        const KVOffset off = measure_offset(real, base, model.rope());
        for (std::size_t li = 0; li < nl; ++li) {
            const std::size_t l = r.layers[li];
            double sr = 0.0, su = 0.0, sv = 0.0;
            for (std::size_t p = 0; p < probe.size(); ++p) {
                sr += norm({off.dk[l].data() + p * off.width, off.width});
                su += l2(real.key(l, p), base.key(l, p));
                sv += norm({off.dv[l].data() + p * off.width, off.width});
            }
            const double inv = 1.0 / static_cast<double>(probe.size());
            rot[li].push_back(sr * inv);
            unrot[li].push_back(su * inv);
            val[li].push_back(sv * inv);
        }
    }
    for (std::size_t li = 0; li < nl; ++li) {
        r.dk_rotated.push_back({mean(rot[li]), stddev(rot[li])});
        r.dk_unrotated.push_back({mean(unrot[li]), stddev(unrot[li])});
        r.dv.push_back({mean(val[li]), stddev(val[li])});
    }
    return r;
}

OffsetVarianceReport offset_variance_experiment(const Model& model, const AnalysisConfig& cfg, std::uint64_t seed) {
    const auto probe = random_prefix(cfg.probe_length, false, mix64(seed ^ fnv1a64("probe")));
    std::vector<std::vector<TokenId>> prefixes;
    for (std::size_t j = 0; j < cfg.prefix_count; ++j) {
        prefixes.push_back(random_prefix(cfg.prefix_length, true, mix64(seed + 0x100 + j)));
    }
    return offset_variance(model, probe, prefixes, cfg.layers);
}

ApproxErrorProfile approximation_error_profile(const std::vector<AgentTurnRecord>& records) {
    ApproxErrorProfile prof;
    auto accumulate = [](std::vector<LayerError>& into, const std::vector<LayerError>& from, double w) {
        if (into.empty()) into.resize(from.size());
        for (std::size_t l = 0; l < from.size(); ++l) {
            into[l].key_cos += w * from[l].key_cos;
            into[l].value_cos += w * from[l].value_cos;
            into[l].key_l2 += w * from[l].key_l2;
            into[l].value_l2 += w * from[l].value_l2;
        }
    };
    for (const auto& r : records) {
        if (r.branch != Branch::Reuse || !r.shadow || r.shadow->positions == 0) continue;
        ++prof.reuse_turns;
        prof.positions += r.shadow->positions;
        const auto w = static_cast<double>(r.shadow->positions);
        accumulate(prof.full, r.shadow->full, w);
        accumulate(prof.plain, r.shadow->plain, w);
        accumulate(prof.nearest, r.shadow->nearest, w);
    }
    if (prof.positions == 0) return prof;
    const double inv = 1.0 / static_cast<double>(prof.positions);
    for (auto* v : {&prof.full, &prof.plain, &prof.nearest}) {
        for (auto& e : *v) {
            e.key_cos *= inv;
            e.value_cos *= inv;
            e.key_l2 *= inv;
            e.value_l2 *= inv;
        }
    }
    return prof;
}

} // namespace kvcomm

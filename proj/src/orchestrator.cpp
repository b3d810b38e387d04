#include "kvcomm/orchestrator.hpp"

#include "kvcomm/error.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <set>

namespace kvcomm {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

KVFragment relabel(const KVFragment& f, std::int64_t start) {
    KVFragment out = f;
    out.start = start;
    return out;
}

std::vector<LayerError> compare_layers(const KVFragment& approx, const KVFragment& dense, std::size_t from) {
    std::vector<LayerError> out(dense.num_layers());
    const std::size_t n = dense.length - from;
    auto cosine = [](std::span<const float> a, std::span<const float> b) {
        double ab = 0.0, aa = 0.0, bb = 0.0;
        for (std::size_t j = 0; j < a.size(); ++j) {
            ab += static_cast<double>(a[j]) * b[j];
            aa += static_cast<double>(a[j]) * a[j];
            bb += static_cast<double>(b[j]) * b[j];
        }
        if (aa == 0.0 || bb == 0.0) return (aa == bb) ? 1.0 : 0.0;
        return ab / std::sqrt(aa * bb);
    };
    auto l2 = [](std::span<const float> a, std::span<const float> b) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.size(); ++j) {
            const double d = static_cast<double>(a[j]) - b[j];
            s += d * d;
        }
        return std::sqrt(s);
    };
    for (std::size_t l = 0; l < dense.num_layers(); ++l) {
        LayerError& e = out[l];
        for (std::size_t p = from; p < dense.length; ++p) {
            e.key_cos += cosine(approx.key(l, p), dense.key(l, p));
            e.value_cos += cosine(approx.value(l, p), dense.value(l, p));
            e.key_l2 += l2(approx.key(l, p), dense.key(l, p));
            e.value_l2 += l2(approx.value(l, p), dense.value(l, p));
        }
        const double inv = 1.0 / static_cast<double>(n);
        e.key_cos *= inv;
        e.value_cos *= inv;
        e.key_l2 *= inv;
        e.value_l2 *= inv;
    }
    return out;
}

// Runs fn(i) for i in [0, n) across threads; rethrows the first failure.
template <class Fn>
void parallel_slots(std::size_t n, Fn fn) {
    std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(static) if (n > 1)
    for (std::size_t i = 0; i < n; ++i) {
        try {
            fn(i);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

} // namespace

const char* to_string(Branch b) {
    return b == Branch::Reuse ? "reuse" : "dense_fallback";
}

const char* to_string(SegmentSource s) {
    switch (s) {
    case SegmentSource::PrefixBase: return "prefix_base";
    case SegmentSource::Approximated: return "approximated";
    case SegmentSource::Dense: return "dense";
    }
    return "?";
}

OrchestratorOptions OrchestratorOptions::from(const WorkloadConfig& cfg) {
    OrchestratorOptions o;
    o.gamma = cfg.gamma;
    o.capacity = cfg.capacity;
    o.max_new_tokens = cfg.max_new_tokens;
    o.rounds = cfg.rounds;
    o.tool_default = cfg.tool_default;
    o.anchor_engine = cfg.anchor_engine;
    return o;
}

Orchestrator::Orchestrator(const Model& model, AgentGraph graph, OrchestratorOptions options)
    : model_(model), graph_(std::move(graph)), options_(std::move(options)) {
    if (!(options_.gamma >= 0.0 && options_.gamma <= 1.0)) throw ContractViolation("gamma must lie in [0, 1]");
    if (options_.rounds < 1) throw ContractViolation("rounds must be >= 1");
    init_system();
}

void Orchestrator::init_system() {
    for (const auto& agent : graph_.agents()) {
        auto& prefixes = prefix_tokens_[agent.id];
        prefixes.clear();
        for (std::size_t i = 0; i < agent.prompt.prefixes.size(); ++i) {
            auto bytes = encode_bytes(agent.prompt.prefixes[i]);
            if (i == 0) bytes.insert(bytes.begin(), kBosToken);
            prefixes.push_back(std::move(bytes));
        }
        if (!options_.anchor_engine) continue;
        const StorePath p0{agent.id, "prefix", 0};
        if (!store_.contains(p0)) {
            store_.put(p0, prefixes[0], std::make_shared<const KVFragment>(model_.prefill(prefixes[0], 0).segment));
        }
        const KVFragment& system = *store_.get(p0)->kv;
        for (std::size_t i = 1; i < prefixes.size(); ++i) {
            const StorePath path{agent.id, "prefix", static_cast<std::int64_t>(i)};
            if (store_.contains(path)) continue;
            auto seg = model_.prefill(prefixes[i], system.end(), &system).segment;
            store_.put(path, prefixes[i], std::make_shared<const KVFragment>(std::move(seg)));
        }
    }
}

Instantiation Orchestrator::instantiate(const AgentSpec& agent, const TurnState& turn) const {
    const auto& prefixes = prefix_tokens_.at(agent.id);
    Instantiation inst;
    auto push = [&](const std::vector<TokenId>& toks, SegmentKind kind, std::size_t slot) {
        inst.spans.push_back({inst.tokens.size(), toks.size(), kind, slot});
        inst.tokens.insert(inst.tokens.end(), toks.begin(), toks.end());
    };
    auto history_round = [&](int t) -> std::optional<std::size_t> {
        const std::int64_t r = t < 0 ? static_cast<std::int64_t>(turn.round) + t : t;
        if (r < 0 || r >= static_cast<std::int64_t>(turn.round)) return std::nullopt;
        return static_cast<std::size_t>(r);
    };
    auto tool_output = [&](const std::string& src) {
        auto it = turn.input.tool_outputs.find(src);
        return encode_bytes(it == turn.input.tool_outputs.end() ? options_.tool_default : it->second);
    };

    push(prefixes[0], SegmentKind::Prefix, 0);
    for (std::size_t i = 0; i < agent.prompt.placeholders.size(); ++i) {
        const PlaceholderRef& ref = agent.prompt.placeholders[i];
        std::vector<TokenId> sample;
        std::optional<StorePath> path;
        switch (ref.kind) {
        case PlaceholderKind::UserQuestion:
            sample = encode_bytes(turn.input.question);
            path = StorePath{kUserInputOwner, "question", static_cast<std::int64_t>(turn.turn)};
            break;
        case PlaceholderKind::AgentCurrent: {
            auto it = turn.responses.find(ref.source);
            if (it == turn.responses.end()) {
                throw ContractViolation("agent '" + agent.id + "' scheduled before upstream '" + ref.source +
                                        "' responded in turn " + std::to_string(turn.turn));
            }
            sample = it->second;
            path = StorePath{ref.source, "response", static_cast<std::int64_t>(turn.turn)};
            break;
        }
        case PlaceholderKind::AgentHistory:
            if (auto r = history_round(ref.history_turn)) {
                const auto& round = turn.earlier_rounds.at(*r);
                auto it = round.find(ref.source);
                if (it == round.end()) throw ContractViolation("no recorded response of '" + ref.source + "' in round " + std::to_string(*r));
                sample = it->second;
                path = StorePath{ref.source, "response", static_cast<std::int64_t>(turn.first_turn + *r)};
            }
            break;
        case PlaceholderKind::ConditionCurrent:
            sample = tool_output(ref.source);
            path = StorePath{ref.source, "condition", static_cast<std::int64_t>(turn.turn)};
            break;
        case PlaceholderKind::ConditionHistory:
            if (auto r = history_round(ref.history_turn)) {
                sample = tool_output(ref.source);
                path = StorePath{ref.source, "condition", static_cast<std::int64_t>(turn.first_turn + *r)};
            }
            break;
        }
        push(sample, SegmentKind::Placeholder, i + 1);
        inst.samples.push_back(std::move(sample));
        inst.paths.push_back(std::move(path));
        push(prefixes[i + 1], SegmentKind::Prefix, i + 1);
    }
    if (inst.tokens.size() > model_.config().max_context) {
        throw ContextOverflow("prompt of agent '" + agent.id + "' has " + std::to_string(inst.tokens.size()) +
                              " tokens, beyond max_context " + std::to_string(model_.config().max_context));
    }
    return inst;
}

std::shared_ptr<const KVFragment> Orchestrator::ensure_base(const StorePath& path, const std::vector<TokenId>& tokens) {
    if (const StoreEntry* e = store_.get(path)) {
        if (e->tokens != tokens) throw ContractViolation("store entry (" + path.owner + ", " + path.kind + ", " + std::to_string(path.index) + ") changed content");
        return e->kv;
    }
    auto frag = store_.find_fragment(tokens);
    if (!frag) {
        frag = std::make_shared<const KVFragment>(model_.prefill(tokens, 0).segment);
        ++base_prefills_;
    }
    return store_.put(path, tokens, frag).kv;
}

void Orchestrator::ensure_placeholder_bases(const AgentSpec& agent, TurnState& turn) {
    const Instantiation inst = instantiate(agent, turn);
    for (std::size_t i = 0; i < inst.samples.size(); ++i) {
        if (inst.paths[i]) ensure_base(*inst.paths[i], inst.samples[i]);
    }
}

std::shared_ptr<const KVFragment> Orchestrator::base_for(const Instantiation& inst, std::size_t slot) const {
    const auto& path = inst.paths.at(slot - 1);
    if (!path) {
        return std::make_shared<const KVFragment>(
            KVFragment::empty(model_.config().num_layers, model_.config().model_dim, 0));
    }
    const StoreEntry* e = store_.get(*path);
    if (e == nullptr) throw ContractViolation("missing base for (" + path->owner + ", " + path->kind + ", " + std::to_string(path->index) + ")");
    return e->kv;
}

std::shared_ptr<const KVFragment> Orchestrator::prefix_base(const std::string& agent, std::size_t slot) const {
    const StoreEntry* e = store_.get({agent, "prefix", static_cast<std::int64_t>(slot)});
    if (e == nullptr) throw ContractViolation("missing prefix base " + std::to_string(slot) + " of agent '" + agent + "'");
    return e->kv;
}

AnchorPool& Orchestrator::pool(const std::string& name) {
    return pools_.try_emplace(name, name, options_.capacity).first->second;
}

const AnchorPool* Orchestrator::find_pool(const std::string& name) const {
    auto it = pools_.find(name);
    return it == pools_.end() ? nullptr : &it->second;
}

DenseResult Orchestrator::dense_generate(const Instantiation& inst) const {
    const auto t0 = Clock::now();
    PrefillResult r = model_.prefill(inst.tokens, 0);
    DenseResult d;
    d.ttft_ms = ms_since(t0);
    d.segments.reserve(inst.spans.size());
    for (const auto& span : inst.spans) d.segments.push_back(slice_cache(r.segment, span));
    d.prompt_cache = r.segment;
    d.response = model_.greedy_decode(r.segment, std::move(r.logits), options_.max_new_tokens);
    return d;
}

void Orchestrator::write_anchor_offsets(const AgentSpec& agent, const Instantiation& inst, const DenseResult& dense,
                                        const std::vector<MatchResult>& matches) {
    const std::size_t n = inst.samples.size();
    std::vector<KVOffset> ph(n), pf(n);
    std::vector<std::shared_ptr<const KVFragment>> bases(n);
    for (std::size_t i = 0; i < n; ++i) bases[i] = base_for(inst, i + 1);
    parallel_slots(n, [&](std::size_t i) {
        ph[i] = measure_offset(dense.segments[2 * i + 1], *bases[i], model_.rope());
        pf[i] = measure_offset(dense.segments[2 * i + 2], *prefix_base(agent.id, i + 1), model_.rope());
    });
    for (std::size_t i = 0; i < n; ++i) {
        const AgentSlot owner{agent.id, i + 1};
        AnchorPool& p = pool(agent.prompt.placeholders[i].name());
        if (Anchor* a = p.find_by_tokens(inst.samples[i])) {
            a->placeholder_offsets[owner] = std::move(ph[i]);
            a->prefix_offsets[owner] = std::move(pf[i]);
        } else if (matches[i].verdict == Verdict::NewAnchor) {
            Anchor a;
            a.tokens = inst.samples[i];
            a.embeddings = model_.embed(a.tokens);
            a.base = bases[i];
            a.placeholder_offsets.emplace(owner, std::move(ph[i]));
            a.prefix_offsets.emplace(owner, std::move(pf[i]));
            p.insert(std::move(a));
        }
    }
}

std::optional<Verdict> Orchestrator::publish_response(const AgentSpec& agent, const TurnState& turn,
                                                      const std::vector<TokenId>& response) {
    const std::string current = "agent_" + agent.id + "_current";
    bool consumed = graph_.is_consumed(current);
    bool history = false;
    for (const auto& a : graph_.agents()) {
        for (const auto& ref : a.prompt.placeholders) {
            history |= ref.kind == PlaceholderKind::AgentHistory && ref.source == agent.id;
        }
    }
    if (!consumed && !history) return std::nullopt;
    auto base = ensure_base({agent.id, "response", static_cast<std::int64_t>(turn.turn)}, response);
    if (!consumed) return std::nullopt;
    AnchorPool& p = pool(current);
    Matrix emb = model_.embed(response);
    const MatchResult m = predict_shareability(response, emb, p, options_.gamma, std::nullopt);
    if (m.verdict == Verdict::NewAnchor && p.find_by_tokens(response) == nullptr) {
        Anchor a;
        a.tokens = response;
        a.embeddings = std::move(emb);
        a.base = std::move(base);
        p.insert(std::move(a));
    }
    return m.verdict;
}

ShadowProfile Orchestrator::shadow_profile(const AgentSpec& agent, const Instantiation& inst, const KVCache& served,
                                           const std::vector<MatchResult>& matches) const {
    ShadowProfile prof;
    const std::size_t from = inst.spans.front().length;
    if (inst.tokens.size() <= from) return prof;
    prof.positions = inst.tokens.size() - from;
    const KVFragment dense = model_.prefill(inst.tokens, 0).segment;
    const std::size_t n = inst.samples.size();
    std::vector<KVFragment> plain(2 * n + 1), nearest(2 * n + 1);
    plain[0] = nearest[0] = *prefix_base(agent.id, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const AgentSlot owner{agent.id, i + 1};
        const AnchorPool& p = *find_pool(agent.prompt.placeholders[i].name());
        const auto ph_start = static_cast<std::int64_t>(inst.spans[2 * i + 1].start);
        const auto pf_start = static_cast<std::int64_t>(inst.spans[2 * i + 2].start);
        const auto base = base_for(inst, i + 1);
        const auto pbase = prefix_base(agent.id, i + 1);
        plain[2 * i + 1] = relabel(*base, ph_start);
        plain[2 * i + 2] = relabel(*pbase, pf_start);
        nearest[2 * i + 1] = approximate_placeholder_nearest(*base, p, matches[i], owner, ph_start, model_.rope());
        nearest[2 * i + 2] = approximate_prefix_kv(*pbase, p, matches[i], owner, pf_start, model_.rope());
    }
    prof.full = compare_layers(served, dense, from);
    prof.plain = compare_layers(concat_fragments(plain), dense, from);
    prof.nearest = compare_layers(concat_fragments(nearest), dense, from);
    return prof;
}

AgentTurnRecord Orchestrator::run_turn(const AgentSpec& agent, TurnState& turn) {
    const auto t0 = Clock::now();
    AgentTurnRecord rec;
    rec.request = turn.request;
    rec.round = turn.round;
    rec.turn = turn.turn;
    rec.agent = agent.id;

    const Instantiation inst = instantiate(agent, turn);
    rec.prompt = inst.tokens;
    const std::size_t n = inst.samples.size();
    std::vector<MatchResult> matches(n);
    bool reuse = options_.anchor_engine && options_.gamma > 0.0;

    if (options_.anchor_engine) {
        ensure_placeholder_bases(agent, turn);
        for (std::size_t i = 0; i < n; ++i) {
            const PlaceholderRef& ref = agent.prompt.placeholders[i];
            const auto& sample = inst.samples[i];
            matches[i] = predict_shareability(sample, model_.embed(sample), pool(ref.name()), options_.gamma,
                                              AgentSlot{agent.id, i + 1});
            const MatchResult& m = matches[i];
            rec.placeholders.push_back({ref.name(), i + 1, sample.size(), m.verdict, m.matched.size(), m.entropy,
                                        m.threshold, m.reason});
            reuse = reuse && m.verdict == Verdict::Shareable;
        }
    }

    for (const auto& span : inst.spans) {
        SegmentRecord s{span.kind, span.slot, "", span.start, span.length, SegmentSource::Dense};
        s.name = span.kind == SegmentKind::Prefix ? "p" + std::to_string(span.slot)
                                                  : agent.prompt.placeholders[span.slot - 1].name();
        if (reuse) s.source = span.slot == 0 ? SegmentSource::PrefixBase : SegmentSource::Approximated;
        rec.segments.push_back(std::move(s));
    }

    if (reuse) {
        rec.branch = Branch::Reuse;
        std::vector<KVFragment> parts(2 * n + 1);
        parts[0] = *prefix_base(agent.id, 0);
        std::vector<const AnchorPool*> pools(n);
        for (std::size_t i = 0; i < n; ++i) pools[i] = find_pool(agent.prompt.placeholders[i].name());
        parallel_slots(n, [&](std::size_t i) {
            const AgentSlot owner{agent.id, i + 1};
            const auto ph_start = static_cast<std::int64_t>(inst.spans[2 * i + 1].start);
            const auto pf_start = static_cast<std::int64_t>(inst.spans[2 * i + 2].start);
            parts[2 * i + 1] = approximate_placeholder_kv(*base_for(inst, i + 1), *pools[i], matches[i], owner, ph_start,
                                                          model_.rope());
            parts[2 * i + 2] = approximate_prefix_kv(*prefix_base(agent.id, i + 1), *pools[i], matches[i], owner,
                                                     pf_start, model_.rope());
        });
        KVCache cache = concat_fragments(parts);
        if (cache.start != 0 || cache.length != inst.tokens.size()) {
            throw ContractViolation("reused cache does not cover the prompt positions");
        }
        std::vector<float> logits = model_.logits_at(cache, inst.tokens.back());
        rec.timings.ttft_ms = ms_since(t0);
        std::optional<KVCache> served;
        if (options_.shadow_dense) served = cache;
        rec.response = model_.greedy_decode(cache, std::move(logits), options_.max_new_tokens);
        for (std::size_t i = 0; i < n; ++i) pool(agent.prompt.placeholders[i].name()).record_access(matches[i].matched);
        rec.reused_tokens = inst.tokens.size();
        if (served) rec.shadow = shadow_profile(agent, inst, *served, matches);
    } else {
        rec.branch = Branch::DenseFallback;
        const double before = ms_since(t0);
        DenseResult dense = dense_generate(inst);
        rec.timings.ttft_ms = before + dense.ttft_ms;
        rec.response = dense.response;
        rec.dense_tokens = inst.tokens.size();
        if (options_.anchor_engine) write_anchor_offsets(agent, inst, dense, matches);
    }

    if (options_.anchor_engine) rec.response_verdict = publish_response(agent, turn, rec.response);
    turn.responses[agent.id] = rec.response;
    rec.timings.total_ms = ms_since(t0);
    return rec;
}

std::vector<AgentTurnRecord> Orchestrator::run_request(const Request& request) {
    const std::size_t req = next_request_++;
    const std::size_t first_turn = next_turn_;
    std::vector<AgentTurnRecord> records;
    std::vector<std::map<std::string, std::vector<TokenId>>> earlier;
    for (std::size_t round = 0; round < options_.rounds; ++round) {
        TurnState st;
        st.request = req;
        st.round = round;
        st.turn = next_turn_++;
        st.first_turn = first_turn;
        st.input = request;
        st.earlier_rounds = earlier;
        for (std::size_t idx : graph_.topological_order()) records.push_back(run_turn(graph_.agents()[idx], st));
        earlier.push_back(std::move(st.responses));
    }
    return records;
}

MemoryStats Orchestrator::memory() const {
    MemoryStats m;
    m.store_bytes = store_.bytes();
    std::set<const KVFragment*> seen;
    for (const auto& [_, e] : store_.entries()) {
        if (e.kv && seen.insert(e.kv.get()).second) m.resident_bytes += e.kv->bytes();
    }
    for (const auto& [_, p] : pools_) {
        m.pool_bytes += p.bytes();
        for (const auto& a : p.anchors()) {
            if (a.base && seen.insert(a.base.get()).second) m.resident_bytes += a.base->bytes();
            m.resident_bytes += a.bytes() - (a.base ? a.base->bytes() : 0);
        }
    }
    return m;
}

WorkloadResult run_workload(const Model& model, const AgentGraph& graph, const std::vector<Request>& requests,
                            const OrchestratorOptions& options) {
    Orchestrator orch(model, graph, options);
    WorkloadResult out;
    for (const auto& r : requests) {
        auto recs = orch.run_request(r);
        out.records.insert(out.records.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
    }
    out.memory = orch.memory();
    for (const auto& [name, p] : orch.pools()) {
        out.pool_sizes[name] = p.size();
        out.pool_high_water[name] = p.high_water();
    }
    return out;
}

} // namespace kvcomm

#include "support.hpp"

#include "kvcomm/error.hpp"
#include "kvcomm/orchestrator.hpp"
#include "kvcomm/reports.hpp"

#include <doctest.h>

#include <set>

using namespace kvcomm;

namespace {

AgentGraph chain3() {
    return AgentGraph({
        AgentSpec::make("solver", "Solve this.\nQ: {user_question}\nA:", {}),
        AgentSpec::make("critic", "Check it.\nQ: {user_question}\nS: {agent_solver_current}\nR:", {"solver"}),
        AgentSpec::make("judge", "Decide.\nQ: {user_question}\nS: {agent_solver_current}\nR: {agent_critic_current}\nF:",
                        {"solver", "critic"}),
    });
}

OrchestratorOptions opts(double gamma = 0.3, std::size_t max_new = 8) {
    OrchestratorOptions o;
    o.gamma = gamma;
    o.max_new_tokens = max_new;
    return o;
}

std::size_t reuse_turns(const std::vector<AgentTurnRecord>& recs) {
    std::size_t n = 0;
    for (const auto& r : recs) n += r.branch == Branch::Reuse;
    return n;
}

} // namespace

TEST_CASE("template parsing examples") {
    const auto t = parse_template("Hello {user_question} bye");
    REQUIRE(t.segments().size() == 3);
    CHECK(t.prefixes == std::vector<std::string>{"Hello ", " bye"});
    CHECK(t.placeholders[0].kind == PlaceholderKind::UserQuestion);
    const auto segs = t.segments();
    CHECK(segs[0].kind == SegmentKind::Prefix);
    CHECK(segs[1].kind == SegmentKind::Placeholder);
    CHECK(segs[1].slot == 1);
    CHECK(segs[2].text == " bye");

    const auto h = parse_template("{agent_2_history_-1}");
    REQUIRE(h.placeholders.size() == 1);
    CHECK(h.placeholders[0].kind == PlaceholderKind::AgentHistory);
    CHECK(h.placeholders[0].source == "2");
    CHECK(h.placeholders[0].history_turn == -1);
    CHECK(h.prefixes == std::vector<std::string>{"", ""});

    CHECK_THROWS_AS(parse_template("{agent_}"), ParseError);
    CHECK_THROWS_AS(parse_template("open { brace"), ParseError);
    CHECK_THROWS_AS(parse_template("close } brace"), ParseError);
    CHECK_THROWS_AS(parse_template("{user_answer}"), ParseError);

    const auto adj = parse_template("{user_question}{condition_tool_current}");
    CHECK(adj.prefixes == std::vector<std::string>{"", "", ""});
    CHECK(adj.placeholders[1].kind == PlaceholderKind::ConditionCurrent);
}

TEST_CASE("placeholder names round trip") {
    for (const char* name : {"user_question", "agent_solver_current", "agent_a1_history_-2", "agent_x_history_3",
                             "condition_calc_current", "condition_calc_history_-1"}) {
        CHECK(PlaceholderRef::parse(name).name() == name);
    }
}

TEST_CASE("agent graph validation and order") {
    const auto g = chain3();
    const std::vector<std::size_t> order = {0, 1, 2};
    CHECK(g.topological_order() == order);
    CHECK(g.is_consumed("agent_solver_current"));
    CHECK_FALSE(g.is_consumed("agent_judge_current"));

    const AgentGraph rev({AgentSpec::make("b", "{agent_a_current}", {"a"}), AgentSpec::make("a", "x", {})});
    CHECK(rev.topological_order() == std::vector<std::size_t>{1, 0});

    CHECK_THROWS_AS(AgentGraph({AgentSpec::make("a", "x", {"b"}), AgentSpec::make("b", "y", {"a"})}), ParseError);
    CHECK_THROWS_AS(AgentGraph({AgentSpec::make("a", "x", {"ghost"})}), ParseError);
    CHECK_THROWS_AS(AgentGraph({AgentSpec::make("a", "{agent_b_current}", {}), AgentSpec::make("b", "y", {})}),
                    ParseError);
    CHECK_THROWS_AS(AgentGraph({AgentSpec::make("a", "x", {}), AgentSpec::make("a", "y", {})}), ParseError);
    CHECK_THROWS_AS(AgentGraph({AgentSpec::make("bad-id", "x", {})}), ParseError);
}

TEST_CASE("shared store is write-once") {
    SharedKVStore store;
    auto frag = std::make_shared<const KVFragment>(KVFragment::empty(1, 2, 0));
    const StorePath p{kUserInputOwner, "question", 0};
    store.put(p, {1, 2}, frag);
    CHECK(store.contains(p));
    CHECK_NOTHROW(store.put(p, {1, 2}, frag));
    CHECK(store.size() == 1);
    CHECK_THROWS_AS(store.put(p, {1, 3}, frag), ContractViolation);
    store.put({"solver", "response", 0}, {1, 2}, frag);
    CHECK(store.find_fragment(std::vector<TokenId>{1, 2}) == frag);
    CHECK(store.size() == 2);
    CHECK(store.bytes() == frag->bytes());
}

TEST_CASE("init_system stores one fragment per prefix") {
    const auto& m = kvtest::default_model();
    const AgentGraph g({AgentSpec::make("a", "one {user_question} two {condition_t_current} three", {})});
    Orchestrator orch(m, g, opts());
    CHECK(orch.store().size() == 3);
    for (std::int64_t i = 0; i < 3; ++i) CHECK(orch.store().contains({"a", "prefix", i}));

    const auto p0 = orch.store().get({"a", "prefix", 0});
    auto want = tokenize("one ").ids;
    CHECK(p0->tokens == want);
    CHECK(*p0->kv == m.prefill(want, 0).segment);

    // p1 is computed with p0 as its only context.
    const auto p1 = orch.store().get({"a", "prefix", 1});
    CHECK(max_abs_diff(*p1->kv, kvtest::in_context(m, want, encode_bytes(" two "))) == 0.0f);

    Orchestrator again(m, g, opts());
    for (const auto& [path, e] : orch.store().entries()) CHECK(*again.store().get(path)->kv == *e.kv);
    orch.init_system();
    CHECK(orch.store().size() == 3);
}

TEST_CASE("question base is computed once for several consumers") {
    const auto& m = kvtest::default_model();
    std::vector<AgentSpec> specs;
    for (const char* id : {"a", "b", "c", "d"}) specs.push_back(AgentSpec::make(id, std::string(id) + ": {user_question}", {}));
    Orchestrator orch(m, AgentGraph(specs), opts());
    const auto recs = orch.run_request({"How many apples are left?", {}});
    CHECK(recs.size() == 4);
    CHECK(orch.base_prefills() == 1);
    const auto* q = orch.store().get({kUserInputOwner, "question", 0});
    REQUIRE(q != nullptr);
    CHECK(*q->kv == m.prefill(encode_bytes("How many apples are left?"), 0).segment);
}

TEST_CASE("response base is recomputed standalone") {
    const auto& m = kvtest::default_model();
    Orchestrator orch(m, chain3(), opts(0.3, 16));
    const auto recs = orch.run_request({"What is 21 times 3?", {}});
    const auto* e = orch.store().get({"solver", "response", 0});
    REQUIRE(e != nullptr);
    REQUIRE(e->tokens.size() >= 4);
    CHECK(*e->kv == m.prefill(e->tokens, 0).segment);

    // The decode-time KV of the response, moved to position 0, differs from
    // the standalone base: the context left its mark beyond rotation.
    const auto& solver = recs[0];
    std::vector<TokenId> all = solver.prompt;
    all.insert(all.end(), solver.response.begin(), solver.response.end());
    const auto full = m.prefill(all, 0).segment;
    const auto decode_kv = slice_cache(full, {solver.prompt.size(), solver.response.size(), SegmentKind::Placeholder, 1});
    const auto moved = shift_positions(decode_kv, 0, m.rope());
    CHECK(max_abs_diff(moved, *e->kv) > 1e-3f);
}

TEST_CASE("history placeholders are empty on the first round") {
    const auto& m = kvtest::default_model();
    const AgentGraph g({AgentSpec::make("a", "Q: {user_question} Before: {agent_a_history_-1} Now:", {})});
    OrchestratorOptions o = opts(0.3, 4);
    o.rounds = 2;
    Orchestrator orch(m, g, o);
    const auto recs = orch.run_request({"Count to three.", {}});
    REQUIRE(recs.size() == 2);
    CHECK(recs[0].segments[3].length == 0);
    CHECK(recs[1].segments[3].length == recs[0].response.size());
    CHECK(orch.store().contains({"a", "response", 0}));
}

TEST_CASE("empty placeholder yields a zero-length base") {
    const auto& m = kvtest::default_model();
    const AgentGraph g({AgentSpec::make("a", "Q: {user_question} end", {})});
    Orchestrator orch(m, g, opts());
    const auto recs = orch.run_request({"", {}});
    REQUIRE(recs.size() == 1);
    const auto* q = orch.store().get({kUserInputOwner, "question", 0});
    REQUIRE(q != nullptr);
    CHECK(q->kv->length == 0);
}

TEST_CASE("cold start then identical replay") {
    const auto& m = kvtest::default_model();
    Orchestrator orch(m, chain3(), opts(0.3, 32));
    const Request req{"Tom has 14 apples and buys 27 more. How many now?", {}};
    const auto first = orch.run_request(req);
    for (const auto& r : first) CHECK(r.branch == Branch::DenseFallback);
    CHECK(orch.pools().at("user_question").size() == 1);
    CHECK(orch.pools().at("agent_solver_current").size() == 1);
    CHECK(orch.pools().at("agent_critic_current").size() == 1);

    const auto second = orch.run_request(req);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(second[i].branch == Branch::Reuse);
        CHECK(second[i].response == first[i].response);
        CHECK(second[i].dense_tokens == 0);
    }
}

TEST_CASE("gamma zero matches the engine-free pipeline") {
    const auto& m = kvtest::default_model();
    const auto reqs = generate_requests({12, 3, 0.5, std::nullopt}, 7);
    auto off = opts(0.3, 8);
    off.anchor_engine = false;
    const auto a = run_workload(m, chain3(), reqs, opts(0.0, 8));
    const auto b = run_workload(m, chain3(), reqs, off);
    CHECK(reuse_turns(a.records) == 0);
    CHECK(transcript_jsonl(a.records) == transcript_jsonl(b.records));
    CHECK(b.memory.store_bytes == 0);
}

TEST_CASE("dense_generate segments reassemble the prompt cache") {
    const auto& m = kvtest::default_model();
    Orchestrator orch(m, chain3(), opts());
    TurnState st;
    st.input = {"What is 5 plus 6?", {}};
    st.responses["solver"] = encode_bytes("eleven");
    const auto inst = orch.instantiate(chain3().agent("critic"), st);
    const auto d = orch.dense_generate(inst);
    CHECK(concat_fragments(d.segments) == d.prompt_cache);
    CHECK(d.prompt_cache == m.prefill(inst.tokens, 0).segment);
    for (std::size_t i = 0; i < inst.spans.size(); ++i) CHECK(d.segments[i] == slice_cache(d.prompt_cache, inst.spans[i]));
    CHECK(orch.dense_generate(inst).response == d.response);

    TurnState missing;
    missing.input = st.input;
    CHECK_THROWS_AS(orch.instantiate(chain3().agent("critic"), missing), ContractViolation);
}

TEST_CASE("workload edge cases") {
    const auto& m = kvtest::default_model();
    const auto none = run_workload(m, chain3(), {}, opts());
    CHECK(none.records.empty());
    CHECK(transcript_jsonl(none.records).empty());

    const auto one = run_workload(m, chain3(), {{"A lone question?", {}}}, opts());
    CHECK(one.records.size() == 3);
    CHECK(reuse_turns(one.records) == 0);
}

TEST_CASE("clustered workload: reuse within (0, 1), monotone in gamma, ledgers hold") {
    const auto& m = kvtest::default_model();
    const auto reqs = generate_requests({50, 24, 0.5, std::nullopt}, 7);
    const auto lo = run_workload(m, chain3(), reqs, opts(0.3, 8));
    const auto hi = run_workload(m, chain3(), reqs, opts(0.9, 8));
    const auto r_lo = reuse_turns(lo.records), r_hi = reuse_turns(hi.records);
    CHECK(r_lo > 0);
    CHECK(r_lo < lo.records.size());
    CHECK(r_lo <= r_hi);

    for (const auto* res : {&lo, &hi}) {
        for (const auto& r : res->records) {
            CHECK(r.dense_tokens + r.reused_tokens == r.prompt.size());
            std::size_t at = 0;
            for (const auto& s : r.segments) {
                CHECK(s.start == at);
                at += s.length;
            }
            CHECK(at == r.prompt.size());
        }
        for (const auto& [name, hw] : res->pool_high_water) CHECK(hw <= 20);
    }
}

TEST_CASE("memory accounting is a recount of store and pools") {
    const auto& m = kvtest::default_model();
    const auto reqs = generate_requests({10, 3, 0.5, std::nullopt}, 7);
    Orchestrator orch(m, chain3(), opts());
    for (const auto& r : reqs) orch.run_request(r);
    std::size_t pool_bytes = 0;
    for (const auto& [_, p] : orch.pools())
        for (const auto& a : p.anchors()) {
            std::size_t b = a.embeddings.data.size() * sizeof(float) + a.base->bytes();
            for (const auto& [__, o] : a.placeholder_offsets) b += o.bytes();
            for (const auto& [__, o] : a.prefix_offsets) b += o.bytes();
            pool_bytes += b;
        }
    CHECK(orch.memory().pool_bytes == pool_bytes);
    CHECK(orch.memory().resident_bytes <= orch.memory().pool_bytes + orch.memory().store_bytes);
}

TEST_CASE("workload config parsing") {
    const auto cfg = parse_workload(R"({"agents": [{"id": "a", "template": "Q: {user_question}"}],
                                        "requests": ["one", {"question": "two", "tool_outputs": {"a": "x"}}]})");
    CHECK(cfg.gamma == 0.3);
    CHECK(cfg.capacity == 20);
    CHECK(cfg.seed == 7);
    CHECK(cfg.requests.size() == 2);
    CHECK(cfg.requests[1].tool_outputs.at("a") == "x");

    const auto seeded = parse_workload(R"({"seed": 11, "agents": []})");
    CHECK(seeded.model.seed == 11);

    CHECK_THROWS_AS(parse_workload(R"({"gama": 0.3})"), ParseError);
    CHECK_THROWS_AS(parse_workload(R"({"gamma": 1.5})"), ParseError);
    CHECK_THROWS_AS(parse_workload(R"({"agents": [{"id": "a"}]})"), ParseError);
    CHECK_THROWS_AS(parse_workload("{not json"), ParseError);
    CHECK_THROWS_AS(load_workload("/nonexistent/config.json"), ParseError);

    const auto echo = parse_workload(workload_to_json(cfg));
    CHECK(workload_to_json(echo) == workload_to_json(cfg));
}

TEST_CASE("request generator is deterministic and clustered") {
    const GeneratorConfig g{40, 5, 0.5, std::nullopt};
    const auto a = generate_requests(g, 3);
    CHECK(a == generate_requests(g, 3));
    CHECK_FALSE(a == generate_requests(g, 4));
    CHECK(a.size() == 40);
    std::set<std::size_t> lengths;
    for (const auto& r : a) lengths.insert(r.question.size());
    CHECK(lengths.size() <= 5);
}

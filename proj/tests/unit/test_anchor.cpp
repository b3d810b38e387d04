#include "support.hpp"

#include "kvcomm/anchor.hpp"
#include "kvcomm/error.hpp"
#include "kvcomm/tokenizer.hpp"

#include <doctest.h>

using namespace kvcomm;
using kvtest::Gen;

namespace {

Anchor make_anchor(std::vector<TokenId> tokens, Matrix embeddings) {
    Anchor a;
    a.tokens = std::move(tokens);
    a.embeddings = std::move(embeddings);
    return a;
}

Matrix rows_of(std::size_t n, std::size_t d, float fill) {
    Matrix m(n, d);
    std::fill(m.data.begin(), m.data.end(), fill);
    return m;
}

std::vector<TokenId> iota_tokens(std::size_t n, TokenId from = 40) {
    std::vector<TokenId> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = from + static_cast<TokenId>(i);
    return t;
}

const AgentSlot kOwner{"solver", 1};

} // namespace

TEST_CASE("anchor weights examples") {
    const Matrix sample = rows_of(3, 4, 0.0f);
    Anchor a = make_anchor(iota_tokens(3), rows_of(3, 4, 1.0f));
    const Anchor* one[] = {&a};
    const auto w1 = anchor_weights(sample, one);
    for (std::size_t i = 0; i < 3; ++i) CHECK(w1.at(i, 0) == 1.0);
    CHECK(w1.scalar == std::vector<double>{1.0});

    Anchor b = make_anchor(iota_tokens(3), rows_of(3, 4, -1.0f));
    const Anchor* two[] = {&a, &b};
    const auto w2 = anchor_weights(sample, two);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(w2.at(i, 0) == doctest::Approx(0.5));
        CHECK(w2.at(i, 1) == doctest::Approx(0.5));
    }
    CHECK_THROWS_AS(anchor_weights(sample, std::span<const Anchor* const>{}), ContractViolation);
}

TEST_CASE("anchor weights saturate with a large distance gap") {
    Gen g(41);
    Matrix sample(4, 8);
    for (auto& x : sample.data) x = static_cast<float>(g.rng.normal());
    Matrix far = sample;
    for (std::size_t i = 0; i < 4; ++i) far(i, 0) += 11.0f;  // per-position distance 11
    Anchor a = make_anchor(iota_tokens(4), sample);
    Anchor b = make_anchor(iota_tokens(4), far);
    const Anchor* two[] = {&a, &b};
    const auto w = anchor_weights(sample, two);
    const double expect = 1.0 / (1.0 + std::exp(-11.0));  // hand softmax of (0, 11)
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(w.at(i, 0) > 0.99);
        CHECK(w.at(i, 0) == doctest::Approx(expect).epsilon(1e-6));
    }
    // Frobenius distance of b is 11 * sqrt(4) = 22.
    CHECK(w.distance[1] == doctest::Approx(22.0).epsilon(1e-6));
    CHECK(w.scalar[0] == doctest::Approx(1.0 / (1.0 + std::exp(-22.0))).epsilon(1e-9));
}

TEST_CASE("anchor weights lie on the simplex") {
    Gen g(42);
    for (int trial = 0; trial < 100; ++trial) {
        const auto len = static_cast<std::size_t>(g.integer(1, 8));
        const auto m = static_cast<std::size_t>(g.integer(1, 6));
        Matrix sample(len, 6);
        for (auto& x : sample.data) x = static_cast<float>(g.real(-3, 3));
        std::vector<Anchor> anchors;
        for (std::size_t a = 0; a < m; ++a) {
            Matrix e(len + static_cast<std::size_t>(g.integer(0, 3)), 6);
            for (auto& x : e.data) x = static_cast<float>(g.real(-3, 3));
            anchors.push_back(make_anchor(iota_tokens(e.rows), e));
        }
        std::vector<const Anchor*> ptrs;
        for (const auto& a : anchors) ptrs.push_back(&a);
        const auto w = anchor_weights(sample, ptrs);
        for (std::size_t i = 0; i < len; ++i) {
            double s = 0.0;
            for (std::size_t a = 0; a < m; ++a) {
                CHECK(w.at(i, a) >= 0.0);
                s += w.at(i, a);
            }
            CHECK(std::fabs(s - 1.0) <= 1e-6);
        }
        double s = 0.0;
        for (double x : w.scalar) s += x;
        CHECK(std::fabs(s - 1.0) <= 1e-6);
        const double h = entropy(w.scalar);
        CHECK(h >= 0.0);
        CHECK(h <= std::log(static_cast<double>(m)) + 1e-12);
    }
}

TEST_CASE("predict_shareability examples") {
    AnchorPool pool("user_question", 10);
    const Matrix sample = rows_of(2, 4, 0.0f);
    const auto toks = iota_tokens(2);
    CHECK(predict_shareability(toks, sample, pool, 0.3, std::nullopt).verdict == Verdict::NewAnchor);

    // Four anchors equidistant from the sample: uniform weights.
    for (float s : {1.0f, -1.0f}) {
        for (std::size_t axis : {0u, 1u}) {
            Matrix e = rows_of(2, 4, 0.0f);
            for (std::size_t i = 0; i < 2; ++i) e(i, axis) = s;
            pool.insert(make_anchor(iota_tokens(2, 90 + static_cast<TokenId>(axis) + (s > 0 ? 0 : 5)), e));
        }
    }
    const auto r = predict_shareability(toks, sample, pool, 0.3, std::nullopt);
    CHECK(r.entropy == doctest::Approx(std::log(4.0)));
    CHECK(r.threshold == doctest::Approx(0.3 * std::log(4.0)));
    CHECK(r.verdict == Verdict::NewAnchor);
    CHECK(predict_shareability(toks, sample, pool, 1.0, std::nullopt).verdict == Verdict::Shareable);
    CHECK(predict_shareability(toks, sample, pool, 0.0, std::nullopt).verdict == Verdict::NewAnchor);
    CHECK_THROWS_AS(predict_shareability(toks, sample, pool, 1.5, std::nullopt), ContractViolation);

    // Longer than every anchor.
    CHECK(predict_shareability(iota_tokens(3), rows_of(3, 4, 0.0f), pool, 0.9, std::nullopt).verdict ==
          Verdict::NewAnchor);
}

TEST_CASE("sample equal to a stored anchor is shareable") {
    AnchorPool pool("user_question", 10);
    Gen g(43);
    Matrix exact(5, 8);
    for (auto& x : exact.data) x = static_cast<float>(g.rng.normal());
    for (int k = 0; k < 3; ++k) {
        Matrix e = exact;
        for (auto& x : e.data) x += 12.0f + static_cast<float>(k);
        pool.insert(make_anchor(iota_tokens(5, 100 + k * 10), e));
    }
    pool.insert(make_anchor(iota_tokens(5), exact));
    const auto r = predict_shareability(iota_tokens(5), exact, pool, 0.3, std::nullopt);
    // Oracle: scalar softmax over Frobenius distances {d_k, 0}.
    std::vector<double> w = {0, 0, 0, 1};
    double z = 1.0;
    for (int k = 0; k < 3; ++k) {
        w[static_cast<std::size_t>(k)] = std::exp(-(12.0 + k) * std::sqrt(5.0 * 8.0));
        z += w[static_cast<std::size_t>(k)];
    }
    double h = 0.0;
    for (double& x : w) {
        x /= z;
        if (x > 0) h -= x * std::log(x);
    }
    CHECK(r.entropy == doctest::Approx(h).epsilon(1e-3));
    CHECK(r.entropy < 1e-6);
    CHECK(r.verdict == Verdict::Shareable);
}

TEST_CASE("owner-specific qualification and the pending-anchor rule") {
    AnchorPool pool("agent_solver_current", 10);
    Matrix e = rows_of(3, 4, 0.0f);
    Anchor a = make_anchor(iota_tokens(3), e);
    a.placeholder_offsets[kOwner] = KVOffset::zeros(1, 4, 3, 0);
    pool.insert(a);
    const AgentSlot other{"judge", 2};
    // No anchor holds offsets for `other`.
    CHECK(predict_shareability(iota_tokens(3), e, pool, 0.9, other).verdict == Verdict::NewAnchor);
    // Only one of the two offsets present: still not qualifying.
    CHECK(predict_shareability(iota_tokens(2, 70), rows_of(2, 4, 0.1f), pool, 0.9, kOwner).verdict ==
          Verdict::NewAnchor);
    pool.find(0)->prefix_offsets[kOwner] = KVOffset::zeros(1, 4, 5, 0);
    CHECK(predict_shareability(iota_tokens(2, 70), rows_of(2, 4, 0.1f), pool, 0.9, kOwner).verdict ==
          Verdict::Shareable);

    // Identical to an anchor that lacks this owner's offsets.
    Anchor b = make_anchor(iota_tokens(3, 60), rows_of(3, 4, 2.0f));
    pool.insert(b);
    const auto r = predict_shareability(iota_tokens(3, 60), rows_of(3, 4, 2.0f), pool, 0.9, kOwner);
    CHECK(r.verdict == Verdict::NewAnchor);
    CHECK(r.reason.find("awaiting") != std::string::npos);
}

TEST_CASE("insert_anchor eviction examples") {
    AnchorPool pool("p", 2);
    CHECK_FALSE(insert_anchor(pool, make_anchor(iota_tokens(1), rows_of(1, 2, 0))).has_value());
    CHECK_FALSE(insert_anchor(pool, make_anchor(iota_tokens(1, 50), rows_of(1, 2, 0))).has_value());
    CHECK(pool.anchors()[0].access_count == 0);
    const AnchorId five[] = {0, 0, 0, 0, 0, 1};
    record_access(pool, five);
    CHECK(pool.find(0)->access_count == 5);
    CHECK(pool.find(1)->access_count == 1);
    CHECK(insert_anchor(pool, make_anchor(iota_tokens(1, 60), rows_of(1, 2, 0))) == AnchorId{1});
    CHECK(pool.size() == 2);

    AnchorPool tie("p", 2);
    insert_anchor(tie, make_anchor(iota_tokens(1), rows_of(1, 2, 0)));
    insert_anchor(tie, make_anchor(iota_tokens(1, 50), rows_of(1, 2, 0)));
    const AnchorId both[] = {0, 0, 0, 1, 1, 1};
    record_access(tie, both);
    CHECK(insert_anchor(tie, make_anchor(iota_tokens(1, 60), rows_of(1, 2, 0))) == AnchorId{0});

    CHECK_THROWS_AS(record_access(tie, std::vector<AnchorId>{99}), ContractViolation);
}

TEST_CASE("accesses change the eviction order") {
    AnchorPool pool("p", 2);
    insert_anchor(pool, make_anchor(iota_tokens(1), rows_of(1, 2, 0)));
    insert_anchor(pool, make_anchor(iota_tokens(1, 50), rows_of(1, 2, 0)));
    AnchorPool copy = pool;
    CHECK(insert_anchor(copy, make_anchor(iota_tokens(1, 60), rows_of(1, 2, 0))) == AnchorId{0});
    const AnchorId twice[] = {0, 0};
    record_access(pool, twice);
    CHECK(pool.find(0)->access_count == 2);
    CHECK(insert_anchor(pool, make_anchor(iota_tokens(1, 60), rows_of(1, 2, 0))) == AnchorId{1});
}

TEST_CASE("capacity holds under random inserts and accesses") {
    Gen g(44);
    AnchorPool pool("p", 20);
    for (int i = 0; i < 100; ++i) {
        insert_anchor(pool, make_anchor(iota_tokens(2, i), rows_of(2, 2, static_cast<float>(i))));
        CHECK(pool.size() <= 20);
        const auto k = g.integer(0, 5);
        for (std::int64_t j = 0; j < k; ++j) {
            const auto& anchors = pool.anchors();
            const AnchorId id[] = {anchors[static_cast<std::size_t>(g.integer(0, static_cast<std::int64_t>(anchors.size()) - 1))].id};
            record_access(pool, id);
        }
    }
    CHECK(pool.size() == 20);
    CHECK(pool.high_water() == 20);
    // The most recently inserted anchor always survives its own insert.
    CHECK(pool.anchors().back().tokens == iota_tokens(2, 99));
}

TEST_CASE("zero capacity keeps nothing") {
    AnchorPool pool("p", 0);
    insert_anchor(pool, make_anchor(iota_tokens(1), rows_of(1, 2, 0)));
    CHECK(pool.empty());
    CHECK(pool.high_water() == 0);
}

namespace {

// A sample placed after a context, with its anchor's offsets measured in that
// very context, plus a decoy anchor whose embeddings are far away.
struct ExactCase {
    std::vector<TokenId> ctx, sample, suffix;
    KVFragment dense, base, prefix_base;
    AnchorPool pool{"user_question", 5};
    MatchResult match;
};

ExactCase build_exact_case() {
    const auto& m = kvtest::default_model();
    const auto& rope = m.rope();
    ExactCase c;
    c.ctx = tokenize("System prompt for the solver.\nQ: ").ids;
    c.sample = encode_bytes("What is 12 plus 30?");
    c.suffix = encode_bytes("\nA:");
    std::vector<TokenId> all = c.ctx;
    all.insert(all.end(), c.sample.begin(), c.sample.end());
    all.insert(all.end(), c.suffix.begin(), c.suffix.end());
    c.dense = m.prefill(all, 0).segment;
    c.base = m.prefill(c.sample, 0).segment;
    c.prefix_base = kvtest::in_context(m, c.ctx, c.suffix);  // suffix with the system prompt as its only context
    const std::size_t p = c.ctx.size(), n = c.sample.size();
    const auto real_ph = slice_cache(c.dense, {p, n, SegmentKind::Placeholder, 1});
    const auto real_px = slice_cache(c.dense, {p + n, c.suffix.size(), SegmentKind::Prefix, 1});

    Anchor decoy = make_anchor(encode_bytes("decoy sample text, long"), m.embed(encode_bytes("decoy sample text, long")));
    for (auto& x : decoy.embeddings.data) x += 20.0f;
    decoy.base = std::make_shared<KVFragment>(m.prefill(decoy.tokens, 0).segment);
    Gen g(45);
    auto junk = g.fragment(m.config().num_layers, m.config().model_dim, decoy.length(), 0);
    decoy.placeholder_offsets[kOwner] = measure_offset(junk, *decoy.base, rope);
    decoy.prefix_offsets[kOwner] = KVOffset::zeros(m.config().num_layers, m.config().model_dim, c.suffix.size(),
                                                   c.prefix_base.start);
    c.pool.insert(decoy);

    Anchor exact = make_anchor(c.sample, m.embed(c.sample));
    exact.base = std::make_shared<KVFragment>(c.base);
    exact.placeholder_offsets[kOwner] = measure_offset(real_ph, c.base, rope);
    exact.prefix_offsets[kOwner] = measure_offset(real_px, c.prefix_base, rope);
    c.pool.insert(exact);

    c.match = predict_shareability(c.sample, m.embed(c.sample), c.pool, 0.3, kOwner);
    return c;
}

} // namespace

TEST_CASE("exact anchor reconstructs the dense cache and decode") {
    const auto& m = kvtest::default_model();
    auto c = build_exact_case();
    REQUIRE(c.match.verdict == Verdict::Shareable);
    REQUIRE(c.match.matched.size() == 2);
    const std::size_t p = c.ctx.size(), n = c.sample.size();

    const auto ph = approximate_placeholder_kv(c.base, c.pool, c.match, kOwner, static_cast<std::int64_t>(p), m.rope());
    CHECK(max_abs_diff(ph, slice_cache(c.dense, {p, n, SegmentKind::Placeholder, 1})) <= 1e-5f);
    const auto px =
        approximate_prefix_kv(c.prefix_base, c.pool, c.match, kOwner, static_cast<std::int64_t>(p + n), m.rope());
    CHECK(max_abs_diff(px, slice_cache(c.dense, {p + n, c.suffix.size(), SegmentKind::Prefix, 1})) <= 1e-5f);

    const std::vector<KVFragment> parts = {slice_cache(c.dense, {0, p, SegmentKind::Prefix, 0}), ph, px};
    auto assembled = concat_fragments(parts);
    auto dense_cache = c.dense;
    std::vector<TokenId> all = c.ctx;
    all.insert(all.end(), c.sample.begin(), c.sample.end());
    all.insert(all.end(), c.suffix.begin(), c.suffix.end());
    const auto dense_logits = m.prefill(all, 0).logits;
    const auto want = m.greedy_decode(dense_cache, dense_logits, 32);
    const auto got = m.greedy_decode(assembled, all.back(), 32);
    CHECK(want.size() == 32);
    CHECK(got == want);
}

TEST_CASE("weights (1, 0) ignore the second anchor") {
    const auto& m = kvtest::default_model();
    auto c = build_exact_case();
    MatchResult forced = c.match;
    const std::size_t exact_index = forced.matched[0] == 1 ? 0 : 1;
    for (std::size_t i = 0; i < forced.weights.positions; ++i) {
        forced.weights.per_position[i * 2 + exact_index] = 1.0;
        forced.weights.per_position[i * 2 + (1 - exact_index)] = 0.0;
    }
    const auto a = approximate_placeholder_kv(c.base, c.pool, forced, kOwner, 9, m.rope());
    MatchResult only = forced;
    only.matched = {forced.matched[exact_index]};
    only.weights.anchors = 1;
    only.weights.per_position.assign(forced.weights.positions, 1.0);
    const auto b = approximate_placeholder_kv(c.base, c.pool, only, kOwner, 9, m.rope());
    CHECK(a == b);
}

TEST_CASE("zero offsets reduce to positional shifts") {
    const auto& m = kvtest::default_model();
    const auto L = m.config().num_layers, D = m.config().model_dim;
    const auto toks = encode_bytes("zero offset");
    AnchorPool pool("user_question", 4);
    Anchor a = make_anchor(toks, m.embed(toks));
    a.base = std::make_shared<KVFragment>(m.prefill(toks, 0).segment);
    a.placeholder_offsets[kOwner] = KVOffset::zeros(L, D, toks.size(), 0);
    const auto prefix_base = kvtest::in_context(m, tokenize("ctx").ids, encode_bytes("tail"));
    a.prefix_offsets[kOwner] = KVOffset::zeros(L, D, 4, prefix_base.start);
    pool.insert(a);
    const auto match = predict_shareability(toks, m.embed(toks), pool, 0.3, kOwner);
    REQUIRE(match.verdict == Verdict::Shareable);
    CHECK(approximate_placeholder_kv(*a.base, pool, match, kOwner, 33, m.rope()) ==
          shift_positions(*a.base, 33, m.rope()));
    CHECK(approximate_prefix_kv(prefix_base, pool, match, kOwner, 50, m.rope()) ==
          shift_positions(prefix_base, 50, m.rope()));
}

TEST_CASE("opposite prefix offsets cancel at equal weights") {
    const auto& m = kvtest::default_model();
    const auto L = m.config().num_layers, D = m.config().model_dim;
    const auto prefix_base = kvtest::in_context(m, tokenize("ctx").ids, encode_bytes("tail"));
    Gen g(46);
    const auto real = g.fragment(L, D, 4, 100);
    const auto o = measure_offset(real, prefix_base, m.rope());
    KVOffset neg = o;
    for (std::size_t l = 0; l < L; ++l) {
        for (auto& x : neg.dk[l]) x = -x;
        for (auto& x : neg.dv[l]) x = -x;
    }
    AnchorPool pool("user_question", 4);
    Anchor a = make_anchor(iota_tokens(2), rows_of(2, D, 0));
    a.prefix_offsets[kOwner] = o;
    Anchor b = make_anchor(iota_tokens(2, 80), rows_of(2, D, 0));
    b.prefix_offsets[kOwner] = neg;
    pool.insert(a);
    pool.insert(b);
    MatchResult match;
    match.verdict = Verdict::Shareable;
    match.matched = {0, 1};
    match.weights.anchors = 2;
    match.weights.scalar = {0.5, 0.5};
    CHECK(max_abs_diff(approximate_prefix_kv(prefix_base, pool, match, kOwner, 77, m.rope()),
                       shift_positions(prefix_base, 77, m.rope())) <= kGeometryEps);

    match.matched = {0, 5};
    CHECK_THROWS_AS(approximate_prefix_kv(prefix_base, pool, match, kOwner, 77, m.rope()), ContractViolation);
    match.matched = {0, 1};
    CHECK_THROWS_AS(approximate_prefix_kv(prefix_base, pool, match, AgentSlot{"critic", 1}, 77, m.rope()),
                    ContractViolation);
}

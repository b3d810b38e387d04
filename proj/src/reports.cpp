#include "kvcomm/reports.hpp"

#include "kvcomm/error.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace kvcomm {

using nlohmann::json;

namespace {

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string dump(const json& j, int indent = 2) {
    return j.dump(indent, ' ', false, json::error_handler_t::replace);
}

json config_or_null(const std::string& config_json) {
    return config_json.empty() ? json() : json::parse(config_json);
}

json layer_error_json(const std::vector<LayerError>& v) {
    json out = json::array();
    for (const auto& e : v) {
        out.push_back({{"key_cos", e.key_cos}, {"value_cos", e.value_cos}, {"key_l2", e.key_l2}, {"value_l2", e.value_l2}});
    }
    return out;
}

json savings_json(const SavingsReport& s) {
    json agents = json::array();
    for (const auto& a : s.agents) {
        agents.push_back({{"agent", a.agent},
                          {"turns", a.turns},
                          {"reuse_turns", a.reuse_turns},
                          {"prompt_tokens", a.prompt_tokens},
                          {"dense_tokens", a.dense_tokens},
                          {"reused_tokens", a.reused_tokens},
                          {"mean_ttft_ms", a.mean_ttft_ms},
                          {"mean_total_ms", a.mean_total_ms}});
    }
    return {{"turns", s.turns},
            {"reuse_turns", s.reuse_turns},
            {"reuse_rate", s.reuse_rate},
            {"prompt_tokens", s.prompt_tokens},
            {"dense_tokens", s.dense_tokens},
            {"reused_tokens", s.reused_tokens},
            {"agents", agents},
            {"memory",
             {{"store_bytes", s.memory.store_bytes},
              {"pool_bytes", s.memory.pool_bytes},
              {"total_bytes", s.memory.store_bytes + s.memory.pool_bytes},
              {"resident_bytes", s.memory.resident_bytes}}}};
}

void put_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_i64(std::ostream& out, std::int64_t v) {
    const auto u = static_cast<std::uint64_t>(v);
    put_u32(out, static_cast<std::uint32_t>(u));
    put_u32(out, static_cast<std::uint32_t>(u >> 32));
}

void put_floats(std::ostream& out, const std::vector<float>& v) {
    for (float f : v) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
}

void write_tensors(const std::filesystem::path& path, const char* magic, std::int64_t start, std::size_t length,
                   std::size_t width, const std::vector<std::vector<float>>& a,
                   const std::vector<std::vector<float>>& b) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write(magic, 4);
    put_u32(out, static_cast<std::uint32_t>(a.size()));
    put_u32(out, static_cast<std::uint32_t>(width));
    put_i64(out, start);
    put_u32(out, static_cast<std::uint32_t>(length));
    for (const auto& layer : a) put_floats(out, layer);
    for (const auto& layer : b) put_floats(out, layer);
}

std::string owner_label(const AgentSlot& s) {
    return s.agent + ":" + std::to_string(s.slot);
}

} // namespace

const char* version_string() {
    return "kvcomm " KVCOMM_VERSION;
}

SavingsReport savings_report(const std::vector<AgentTurnRecord>& records, const MemoryStats& memory) {
    SavingsReport s;
    s.memory = memory;
    std::map<std::string, std::size_t> index;
    for (const auto& r : records) {
        auto [it, fresh] = index.try_emplace(r.agent, s.agents.size());
        if (fresh) s.agents.push_back({r.agent});
        AgentSavings& a = s.agents[it->second];
        ++a.turns;
        a.prompt_tokens += r.prompt.size();
        a.dense_tokens += r.dense_tokens;
        a.reused_tokens += r.reused_tokens;
        a.mean_ttft_ms += r.timings.ttft_ms;
        a.mean_total_ms += r.timings.total_ms;
        if (r.branch == Branch::Reuse) {
            ++a.reuse_turns;
            ++s.reuse_turns;
        }
        ++s.turns;
        s.prompt_tokens += r.prompt.size();
        s.dense_tokens += r.dense_tokens;
        s.reused_tokens += r.reused_tokens;
    }
    for (auto& a : s.agents) {
        a.mean_ttft_ms /= static_cast<double>(a.turns);
        a.mean_total_ms /= static_cast<double>(a.turns);
    }
    s.reuse_rate = s.turns == 0 ? 0.0 : static_cast<double>(s.reuse_turns) / static_cast<double>(s.turns);
    return s;
}

std::string transcript_jsonl(const std::vector<AgentTurnRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        json segments = json::array();
        for (const auto& s : r.segments) {
            segments.push_back({{"name", s.name}, {"start", s.start}, {"length", s.length}, {"source", to_string(s.source)}});
        }
        json j = {{"request", r.request},
                  {"round", r.round},
                  {"turn", r.turn},
                  {"agent", r.agent},
                  {"branch", to_string(r.branch)},
                  {"prompt_tokens", r.prompt.size()},
                  {"dense_tokens", r.dense_tokens},
                  {"reused_tokens", r.reused_tokens},
                  {"segments", segments},
                  {"response_tokens", r.response},
                  {"response_text", detokenize(r.response)}};
        out += dump(j, -1) + "\n";
    }
    return out;
}

std::string timings_jsonl(const std::vector<AgentTurnRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        json j = {{"request", r.request},
                  {"round", r.round},
                  {"agent", r.agent},
                  {"branch", to_string(r.branch)},
                  {"ttft_ms", r.timings.ttft_ms},
                  {"total_ms", r.timings.total_ms}};
        out += dump(j, -1) + "\n";
    }
    return out;
}

std::string diagnostics_jsonl(const std::vector<AgentTurnRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        json ph = json::array();
        for (const auto& p : r.placeholders) {
            ph.push_back({{"name", p.name},
                          {"slot", p.slot},
                          {"length", p.length},
                          {"verdict", to_string(p.verdict)},
                          {"matched", p.matched},
                          {"entropy", p.entropy},
                          {"threshold", p.threshold},
                          {"reason", p.reason}});
        }
        json j = {{"request", r.request}, {"round", r.round}, {"agent", r.agent}, {"branch", to_string(r.branch)},
                  {"placeholders", ph}};
        if (r.response_verdict) j["response_verdict"] = to_string(*r.response_verdict);
        if (r.shadow) {
            j["shadow"] = {{"positions", r.shadow->positions},
                           {"full", layer_error_json(r.shadow->full)},
                           {"plain", layer_error_json(r.shadow->plain)},
                           {"nearest", layer_error_json(r.shadow->nearest)}};
        }
        out += dump(j, -1) + "\n";
    }
    return out;
}

std::string run_report_json(const std::string& config_json, const SavingsReport& savings, const WorkloadResult& result) {
    json j = {{"version", version_string()},
              {"config", config_or_null(config_json)},
              {"savings", savings_json(savings)},
              {"pool_sizes", result.pool_sizes},
              {"pool_high_water", result.pool_high_water}};
    return dump(j);
}

std::string pool_dump_json(const Orchestrator& orch) {
    json pools = json::array();
    for (const auto& [name, p] : orch.pools()) {
        json anchors = json::array();
        for (const auto& a : p.anchors()) {
            json ph = json::array(), pf = json::array();
            for (const auto& [o, _] : a.placeholder_offsets) ph.push_back(owner_label(o));
            for (const auto& [o, _] : a.prefix_offsets) pf.push_back(owner_label(o));
            anchors.push_back({{"id", a.id},
                               {"length", a.length()},
                               {"access_count", a.access_count},
                               {"insertion_index", a.insertion_index},
                               {"bytes", a.bytes()},
                               {"placeholder_offsets", ph},
                               {"prefix_offsets", pf}});
        }
        pools.push_back({{"name", name},
                         {"capacity", p.capacity()},
                         {"size", p.size()},
                         {"high_water", p.high_water()},
                         {"bytes", p.bytes()},
                         {"anchors", anchors}});
    }
    json store = json::array();
    std::set<const KVFragment*> seen;
    for (const auto& [path, e] : orch.store().entries()) {
        const bool first = e.kv && seen.insert(e.kv.get()).second;
        store.push_back({{"owner", path.owner},
                         {"kind", path.kind},
                         {"index", path.index},
                         {"length", e.tokens.size()},
                         {"bytes", e.kv ? e.kv->bytes() : 0},
                         {"shared", !first}});
    }
    const MemoryStats m = orch.memory();
    json j = {{"version", version_string()},
              {"pools", pools},
              {"store", store},
              {"memory",
               {{"store_bytes", m.store_bytes},
                {"pool_bytes", m.pool_bytes},
                {"total_bytes", m.store_bytes + m.pool_bytes},
                {"resident_bytes", m.resident_bytes}}}};
    return dump(j);
}

std::vector<std::filesystem::path> dump_pool_tensors(const Orchestrator& orch, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> written;
    for (const auto& [name, p] : orch.pools()) {
        for (const auto& a : p.anchors()) {
            const std::string stem = name + "_anchor" + std::to_string(a.id);
            if (a.base) {
                auto path = dir / (stem + "_base.kvf");
                write_tensors(path, "KVF1", a.base->start, a.base->length, a.base->width, a.base->keys, a.base->values);
                written.push_back(path);
            }
            auto offsets = [&](const std::map<AgentSlot, KVOffset>& m, const char* kind) {
                for (const auto& [o, off] : m) {
                    auto path = dir / (stem + "_" + kind + "_" + o.agent + "_" + std::to_string(o.slot) + ".kvo");
                    write_tensors(path, "KVO1", off.base_start, off.length, off.width, off.dk, off.dv);
                    written.push_back(path);
                }
            };
            offsets(a.placeholder_offsets, "ph");
            offsets(a.prefix_offsets, "pf");
        }
    }
    return written;
}

std::string correlation_csv(const CorrelationReport& r) {
    std::ostringstream out;
    out << "layer,key_rho,value_rho,vanishing";
    for (const auto& b : r.bins) out << "," << b.label << "_key";
    for (const auto& b : r.bins) out << "," << b.label << "_value";
    out << "\n";
    auto rho = [](const std::optional<double>& v) { return v ? num(*v) : std::string("undefined"); };
    for (std::size_t i = 0; i < r.layers.size(); ++i) {
        out << r.layers[i] << "," << rho(r.key_rho[i]) << "," << rho(r.value_rho[i]) << ","
            << (r.vanishing[i] ? 1 : 0);
        for (const auto& b : r.bins) out << "," << num(b.key_mean[i]);
        for (const auto& b : r.bins) out << "," << num(b.value_mean[i]);
        out << "\n";
    }
    return out.str();
}

std::string correlation_json(const CorrelationReport& r, const std::string& config_json) {
    json layers = json::array();
    for (std::size_t i = 0; i < r.layers.size(); ++i) {
        json bins = json::object();
        for (const auto& b : r.bins) bins[b.label] = {{"key", b.key_mean[i]}, {"value", b.value_mean[i]}};
        layers.push_back({{"layer", r.layers[i]},
                          {"key_rho", r.key_rho[i] ? json(*r.key_rho[i]) : json("undefined")},
                          {"value_rho", r.value_rho[i] ? json(*r.value_rho[i]) : json("undefined")},
                          {"vanishing", r.vanishing[i]},
                          {"bins", bins}});
    }
    json bins = json::array();
    for (const auto& b : r.bins) bins.push_back({{"label", b.label}, {"embedding_lo", b.embedding_lo}, {"embedding_hi", b.embedding_hi}});
    json j = {{"version", version_string()}, {"config", config_or_null(config_json)}, {"experiment", r.experiment},
              {"pairs", r.pairs.size()},      {"bins", bins},                           {"layers", layers}};
    return dump(j);
}

std::string offset_variance_csv(const OffsetVarianceReport& r) {
    std::ostringstream out;
    out << "layer,dk_rot_mean,dk_rot_std,dk_unrot_mean,dk_unrot_std,dv_mean,dv_std\n";
    for (std::size_t i = 0; i < r.layers.size(); ++i) {
        out << r.layers[i] << "," << num(r.dk_rotated[i].mean) << "," << num(r.dk_rotated[i].std) << ","
            << num(r.dk_unrotated[i].mean) << "," << num(r.dk_unrotated[i].std) << "," << num(r.dv[i].mean) << ","
            << num(r.dv[i].std) << "\n";
    }
    return out.str();
}

std::string offset_variance_json(const OffsetVarianceReport& r, const std::string& config_json) {
    json layers = json::array();
    for (std::size_t i = 0; i < r.layers.size(); ++i) {
        layers.push_back({{"layer", r.layers[i]},
                          {"dk_rotated", {{"mean", r.dk_rotated[i].mean}, {"std", r.dk_rotated[i].std}}},
                          {"dk_unrotated", {{"mean", r.dk_unrotated[i].mean}, {"std", r.dk_unrotated[i].std}}},
                          {"dv", {{"mean", r.dv[i].mean}, {"std", r.dv[i].std}}}});
    }
    json j = {{"version", version_string()},
              {"config", config_or_null(config_json)},
              {"experiment", "offset-variance"},
              {"prefixes", r.prefixes},
              {"probe_length", r.probe_length},
              {"layers", layers}};
    return dump(j);
}

std::string approx_error_csv(const ApproxErrorProfile& p) {
    std::ostringstream out;
    out << "layer";
    for (const char* mode : {"full", "plain", "nearest"}) {
        for (const char* m : {"key_cos", "value_cos", "key_l2", "value_l2"}) out << "," << mode << "_" << m;
    }
    out << "\n";
    for (std::size_t l = 0; l < p.full.size(); ++l) {
        out << l;
        for (const auto* v : {&p.full, &p.plain, &p.nearest}) {
            const LayerError& e = (*v)[l];
            out << "," << num(e.key_cos) << "," << num(e.value_cos) << "," << num(e.key_l2) << "," << num(e.value_l2);
        }
        out << "\n";
    }
    return out.str();
}

std::string approx_error_json(const ApproxErrorProfile& p, const std::string& config_json) {
    json j = {{"version", version_string()},
              {"config", config_or_null(config_json)},
              {"experiment", "approx-error"},
              {"reuse_turns", p.reuse_turns},
              {"positions", p.positions},
              {"full", layer_error_json(p.full)},
              {"plain", layer_error_json(p.plain)},
              {"nearest", layer_error_json(p.nearest)}};
    return dump(j);
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "parameter,value,reuse_rate,reuse_turns,turns,dense_tokens,reused_tokens,memory_bytes\n";
    for (const auto& r : rows) {
        out << r.parameter << "," << num(r.value) << "," << num(r.savings.reuse_rate) << "," << r.savings.reuse_turns
            << "," << r.savings.turns << "," << r.savings.dense_tokens << "," << r.savings.reused_tokens << ","
            << r.savings.memory.store_bytes + r.savings.memory.pool_bytes << "\n";
    }
    return out.str();
}

std::string sweep_json(const std::vector<SweepRow>& rows, const std::string& config_json) {
    json table = json::array();
    for (const auto& r : rows) {
        table.push_back({{"parameter", r.parameter}, {"value", r.value}, {"savings", savings_json(r.savings)}});
    }
    json j = {{"version", version_string()}, {"config", config_or_null(config_json)}, {"rows", table}};
    return dump(j);
}

void write_file(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << content;
    if (!out) throw Error("failed writing " + path.string());
}

} // namespace kvcomm

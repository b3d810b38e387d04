#include "kvcomm/workload.hpp"

#include "kvcomm/error.hpp"
#include "kvcomm/random.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace kvcomm {

using nlohmann::json;

namespace {

// '#' marks a two-digit number slot.
constexpr const char* kSkeletons[] = {
    "Janet's ducks lay # eggs per day. She eats # for breakfast and sells the rest at $# each. How much does she make?",
    "A robe takes # bolts of blue fiber and # bolts of white fiber. How many bolts does it take in total for # robes?",
    "Tom buys # apples and # pears. He gives away # fruits. How many fruits does Tom have left?",
    "A train travels # miles per hour for # hours, then # miles more. How far does it go?",
    "There are # students in a class. # of them play chess and # play soccer. How many play neither?",
    "A baker makes # loaves each morning and # each evening. She sells # loaves a day. How many are left?",
    "Maria reads # pages on Monday, # pages on Tuesday and # pages on Friday. How many pages did she read?",
    "A farmer has # cows and # sheep. He sells # animals at the market. How many animals remain?",
    "A shop sells pens for $# and notebooks for $#. Ali buys # of each. What does he pay?",
    "A tank holds # liters. It leaks # liters per hour and is refilled with # liters. What is left after one hour?",
    "Lena saves $# each week for # weeks and then spends $#. How much money does she keep?",
    "A garden has # rows with # plants in each row. # plants die. How many plants survive?",
};
constexpr std::size_t kNumSkeletons = sizeof(kSkeletons) / sizeof(kSkeletons[0]);

std::size_t count_slots(const std::string& s) {
    std::size_t n = 0;
    for (char c : s) n += c == '#';
    return n;
}

std::string render(const std::string& skeleton, const std::vector<int>& numbers) {
    std::string out;
    std::size_t k = 0;
    for (char c : skeleton) {
        if (c == '#') {
            out += std::to_string(numbers[k++]);
        } else {
            out.push_back(c);
        }
    }
    return out;
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("field '") + key + "': " + e.what());
    }
}

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, _] : j.items()) {
        if (!ok.contains(k)) throw ParseError("unknown key '" + k + "' in " + where);
    }
}

ModelConfig parse_model(const json& j) {
    if (!j.is_object()) throw ParseError("'model' must be an object");
    reject_unknown(j,
                   {"num_layers", "num_heads", "head_dim", "model_dim", "ffn_dim", "vocab_size", "rope_base",
                    "weight_scale", "seed", "max_context"},
                   "model");
    ModelConfig m;
    m.num_layers = get_or(j, "num_layers", m.num_layers);
    m.num_heads = get_or(j, "num_heads", m.num_heads);
    m.head_dim = get_or(j, "head_dim", m.head_dim);
    m.model_dim = get_or(j, "model_dim", m.num_heads * m.head_dim);
    m.ffn_dim = get_or(j, "ffn_dim", m.ffn_dim);
    m.vocab_size = get_or(j, "vocab_size", m.vocab_size);
    m.rope_base = get_or(j, "rope_base", m.rope_base);
    m.weight_scale = get_or(j, "weight_scale", m.weight_scale);
    m.seed = get_or(j, "seed", m.seed);
    m.max_context = get_or(j, "max_context", m.max_context);
    return m;
}

json model_to_json(const ModelConfig& m) {
    return {{"num_layers", m.num_layers}, {"num_heads", m.num_heads},   {"head_dim", m.head_dim},
            {"model_dim", m.model_dim},   {"ffn_dim", m.ffn_dim},       {"vocab_size", m.vocab_size},
            {"rope_base", m.rope_base},   {"weight_scale", m.weight_scale}, {"seed", m.seed},
            {"max_context", m.max_context}};
}

} // namespace

std::vector<Request> generate_requests(const GeneratorConfig& cfg, std::uint64_t seed) {
    if (cfg.clusters == 0 && cfg.count > 0) throw ParseError("generator needs at least one cluster");
    if (!(cfg.variation >= 0.0 && cfg.variation <= 1.0)) throw ParseError("generator variation must lie in [0, 1]");
    SplitMix64 rng(mix64(cfg.seed.value_or(seed) ^ fnv1a64("requests")));
    struct Cluster {
        std::string skeleton;
        std::vector<int> numbers;
    };
    std::vector<Cluster> clusters;
    for (std::size_t c = 0; c < cfg.clusters; ++c) {
        Cluster cl{kSkeletons[c % kNumSkeletons], {}};
        for (std::size_t k = 0; k < count_slots(cl.skeleton); ++k) cl.numbers.push_back(10 + static_cast<int>(rng.below(90)));
        clusters.push_back(std::move(cl));
    }
    std::vector<Request> out;
    out.reserve(cfg.count);
    for (std::size_t r = 0; r < cfg.count; ++r) {
        const Cluster& cl = clusters[rng.below(clusters.size())];
        std::vector<int> numbers = cl.numbers;
        for (int& n : numbers) {
            if (rng.uniform() < cfg.variation) n = 10 + static_cast<int>(rng.below(90));
        }
        out.push_back({render(cl.skeleton, numbers), {}});
    }
    return out;
}

std::vector<Request> WorkloadConfig::resolved_requests() const {
    std::vector<Request> out = requests;
    if (generator) {
        auto more = generate_requests(*generator, seed);
        out.insert(out.end(), more.begin(), more.end());
    }
    return out;
}

AgentGraph WorkloadConfig::graph() const {
    std::vector<AgentSpec> specs;
    for (const auto& a : agents) specs.push_back(AgentSpec::make(a.id, a.template_text, a.upstream));
    return AgentGraph(std::move(specs));
}

WorkloadConfig parse_workload(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError("workload config must be a JSON object");
    reject_unknown(j,
                   {"model", "agents", "gamma", "capacity", "seed", "max_new_tokens", "rounds", "tool_default",
                    "anchor_engine", "requests", "generator", "analysis", "output_dir"},
                   "workload config");
    WorkloadConfig cfg;
    if (j.contains("model")) cfg.model = parse_model(j.at("model"));
    cfg.seed = get_or(j, "seed", j.contains("model") ? cfg.model.seed : cfg.seed);
    cfg.model.seed = cfg.seed;
    cfg.model.validate();

    cfg.gamma = get_or(j, "gamma", cfg.gamma);
    if (!(cfg.gamma >= 0.0 && cfg.gamma <= 1.0)) throw ParseError("gamma must lie in [0, 1]");
    cfg.capacity = get_or(j, "capacity", cfg.capacity);
    cfg.max_new_tokens = get_or(j, "max_new_tokens", cfg.max_new_tokens);
    cfg.rounds = get_or(j, "rounds", cfg.rounds);
    if (cfg.rounds < 1) throw ParseError("rounds must be >= 1");
    cfg.tool_default = get_or(j, "tool_default", cfg.tool_default);
    cfg.anchor_engine = get_or(j, "anchor_engine", cfg.anchor_engine);
    cfg.output_dir = get_or(j, "output_dir", cfg.output_dir);

    if (j.contains("agents")) {
        const json& agents = j.at("agents");
        if (!agents.is_array()) throw ParseError("'agents' must be an array");
        for (const auto& a : agents) {
            reject_unknown(a, {"id", "template", "upstream"}, "agent");
            if (!a.contains("id") || !a.contains("template")) throw ParseError("agent entries need 'id' and 'template'");
            cfg.agents.push_back({get_or<std::string>(a, "id", ""), get_or<std::string>(a, "template", ""),
                                  get_or<std::vector<std::string>>(a, "upstream", {})});
        }
    }
    if (j.contains("requests")) {
        const json& reqs = j.at("requests");
        if (!reqs.is_array()) throw ParseError("'requests' must be an array");
        for (const auto& r : reqs) {
            if (r.is_string()) {
                cfg.requests.push_back({r.get<std::string>(), {}});
                continue;
            }
            reject_unknown(r, {"question", "tool_outputs"}, "request");
            cfg.requests.push_back({get_or<std::string>(r, "question", ""),
                                    get_or<std::map<std::string, std::string>>(r, "tool_outputs", {})});
        }
    }
    if (j.contains("generator")) {
        const json& g = j.at("generator");
        reject_unknown(g, {"kind", "count", "clusters", "variation", "seed"}, "generator");
        if (get_or<std::string>(g, "kind", "clustered") != "clustered") {
            throw ParseError("unknown generator kind '" + g.at("kind").get<std::string>() + "'");
        }
        GeneratorConfig gen;
        gen.count = get_or(g, "count", gen.count);
        gen.clusters = get_or(g, "clusters", gen.clusters);
        gen.variation = get_or(g, "variation", gen.variation);
        if (g.contains("seed")) gen.seed = get_or<std::uint64_t>(g, "seed", 0);
        cfg.generator = gen;
    }
    if (j.contains("analysis")) {
        const json& a = j.at("analysis");
        reject_unknown(a, {"sample_tokens", "pairs", "bins", "prefix_count", "prefix_length", "probe_length", "layers",
                          "pair_selection"},
                       "analysis");
        auto& an = cfg.analysis;
        an.sample_tokens = get_or(a, "sample_tokens", an.sample_tokens);
        an.pairs = get_or(a, "pairs", an.pairs);
        an.bins = get_or(a, "bins", an.bins);
        an.prefix_count = get_or(a, "prefix_count", an.prefix_count);
        an.prefix_length = get_or(a, "prefix_length", an.prefix_length);
        an.probe_length = get_or(a, "probe_length", an.probe_length);
        an.layers = get_or(a, "layers", an.layers);
        an.pair_selection = get_or(a, "pair_selection", an.pair_selection);
        if (an.pair_selection != "closest" && an.pair_selection != "stratified") {
            throw ParseError("analysis.pair_selection must be 'closest' or 'stratified'");
        }
        if (an.bins < 1 || an.pairs < 3 * an.bins) throw ParseError("analysis.pairs must be at least 3 x bins");
        if (an.sample_tokens < 2) throw ParseError("analysis.sample_tokens must be >= 2");
        for (auto l : an.layers) {
            if (l >= cfg.model.num_layers) throw ParseError("analysis.layers lists layer " + std::to_string(l) + " beyond the model");
        }
    }
    if (!cfg.agents.empty()) cfg.graph();  // surfaces template and graph errors at parse time
    return cfg;
}

WorkloadConfig load_workload(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open config file '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_workload(ss.str());
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::string workload_to_json(const WorkloadConfig& cfg, int indent) {
    json agents = json::array();
    for (const auto& a : cfg.agents) agents.push_back({{"id", a.id}, {"template", a.template_text}, {"upstream", a.upstream}});
    json requests = json::array();
    for (const auto& r : cfg.requests) requests.push_back({{"question", r.question}, {"tool_outputs", r.tool_outputs}});
    json j = {{"model", model_to_json(cfg.model)},
              {"agents", agents},
              {"gamma", cfg.gamma},
              {"capacity", cfg.capacity},
              {"seed", cfg.seed},
              {"max_new_tokens", cfg.max_new_tokens},
              {"rounds", cfg.rounds},
              {"tool_default", cfg.tool_default},
              {"anchor_engine", cfg.anchor_engine},
              {"requests", requests},
              {"output_dir", cfg.output_dir}};
    if (cfg.generator) {
        json g = {{"kind", "clustered"},
                  {"count", cfg.generator->count},
                  {"clusters", cfg.generator->clusters},
                  {"variation", cfg.generator->variation}};
        if (cfg.generator->seed) g["seed"] = *cfg.generator->seed;
        j["generator"] = g;
    }
    const auto& an = cfg.analysis;
    j["analysis"] = {{"sample_tokens", an.sample_tokens}, {"pairs", an.pairs},
                     {"bins", an.bins},                   {"prefix_count", an.prefix_count},
                     {"prefix_length", an.prefix_length}, {"probe_length", an.probe_length},
                     {"layers", an.layers},               {"pair_selection", an.pair_selection}};
    return j.dump(indent, ' ', false, json::error_handler_t::replace);
}

} // namespace kvcomm

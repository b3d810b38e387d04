#include "kvcomm/agent_graph.hpp"

#include "kvcomm/error.hpp"

#include <algorithm>
#include <map>
#include <regex>

namespace kvcomm {

AgentSpec AgentSpec::make(std::string id, std::string template_text, std::vector<std::string> upstream) {
    AgentSpec spec;
    spec.id = std::move(id);
    spec.prompt = parse_template(template_text);
    spec.template_text = std::move(template_text);
    spec.upstream = std::move(upstream);
    return spec;
}

AgentGraph::AgentGraph(std::vector<AgentSpec> agents) : agents_(std::move(agents)) {
    static const std::regex id_pattern("^[A-Za-z0-9]+$");
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < agents_.size(); ++i) {
        const auto& a = agents_[i];
        if (!std::regex_match(a.id, id_pattern)) throw ParseError("agent id '" + a.id + "' must be alphanumeric");
        if (!index.emplace(a.id, i).second) throw ParseError("duplicate agent id '" + a.id + "'");
    }
    std::vector<std::vector<std::size_t>> children(agents_.size());
    std::vector<std::size_t> indegree(agents_.size(), 0);
    for (std::size_t i = 0; i < agents_.size(); ++i) {
        const auto& a = agents_[i];
        for (const auto& up : a.upstream) {
            auto it = index.find(up);
            if (it == index.end()) throw ParseError("agent '" + a.id + "' lists unknown upstream '" + up + "'");
            children[it->second].push_back(i);
            ++indegree[i];
        }
        for (const auto& ref : a.prompt.placeholders) {
            if (ref.kind != PlaceholderKind::AgentCurrent) continue;
            if (std::find(a.upstream.begin(), a.upstream.end(), ref.source) == a.upstream.end()) {
                throw ParseError("agent '" + a.id + "' reads {" + ref.name() + "} but '" + ref.source +
                                 "' is not upstream of it");
            }
        }
    }
    std::vector<std::size_t> ready;
    for (std::size_t i = 0; i < agents_.size(); ++i) {
        if (indegree[i] == 0) ready.push_back(i);
    }
    while (!ready.empty()) {
        const auto it = std::min_element(ready.begin(), ready.end());
        const std::size_t next = *it;
        ready.erase(it);
        order_.push_back(next);
        for (std::size_t c : children[next]) {
            if (--indegree[c] == 0) ready.push_back(c);
        }
    }
    if (order_.size() != agents_.size()) throw ParseError("agent graph contains a cycle");
}

const AgentSpec& AgentGraph::agent(const std::string& id) const {
    for (const auto& a : agents_) {
        if (a.id == id) return a;
    }
    throw ContractViolation("unknown agent '" + id + "'");
}

bool AgentGraph::is_consumed(const std::string& placeholder_name) const {
    for (const auto& a : agents_) {
        for (const auto& ref : a.prompt.placeholders) {
            if (ref.name() == placeholder_name) return true;
        }
    }
    return false;
}

} // namespace kvcomm

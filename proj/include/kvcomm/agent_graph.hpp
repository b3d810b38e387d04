#pragma once

#include "kvcomm/prompt_template.hpp"

#include <string>
#include <vector>

namespace kvcomm {

struct AgentSpec {
    std::string id;
    std::string template_text;
    PromptTemplate prompt;
    std::vector<std::string> upstream;

    /// Parses template_text into `prompt`.
    static AgentSpec make(std::string id, std::string template_text, std::vector<std::string> upstream);
};

/// Directed acyclic graph of agents. Every {agent_X_current} placeholder
/// needs X listed upstream; edges follow `upstream`.
class AgentGraph {
public:
    /// Throws ParseError on duplicate or malformed ids, unknown upstream
    /// agents, missing upstream edges, or a cycle.
    explicit AgentGraph(std::vector<AgentSpec> agents);

    const std::vector<AgentSpec>& agents() const { return agents_; }
    const AgentSpec& agent(const std::string& id) const;

    /// Kahn order; ties resolved by declaration order.
    const std::vector<std::size_t>& topological_order() const { return order_; }

    /// Whether any template consumes the placeholder with this name.
    bool is_consumed(const std::string& placeholder_name) const;

private:
    std::vector<AgentSpec> agents_;
    std::vector<std::size_t> order_;
};

} // namespace kvcomm

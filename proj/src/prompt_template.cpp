#include "kvcomm/prompt_template.hpp"

#include "kvcomm/error.hpp"

#include <regex>

namespace kvcomm {

std::string PlaceholderRef::name() const {
    switch (kind) {
    case PlaceholderKind::UserQuestion: return "user_question";
    case PlaceholderKind::AgentCurrent: return "agent_" + source + "_current";
    case PlaceholderKind::AgentHistory: return "agent_" + source + "_history_" + std::to_string(history_turn);
    case PlaceholderKind::ConditionCurrent: return "condition_" + source + "_current";
    case PlaceholderKind::ConditionHistory: return "condition_" + source + "_history_" + std::to_string(history_turn);
    }
    return {};
}

PlaceholderRef PlaceholderRef::parse(std::string_view name) {
    static const std::regex pattern(R"(^(agent|condition)_([A-Za-z0-9]+)_(current|history_(-?[0-9]+))$)");
    const std::string s(name);
    if (s == "user_question") return {};
    std::smatch m;
    if (!std::regex_match(s, m, pattern)) throw ParseError("unknown placeholder {" + s + "}");
    PlaceholderRef ref;
    const bool agent = m[1] == "agent";
    ref.source = m[2];
    if (m[3] == "current") {
        ref.kind = agent ? PlaceholderKind::AgentCurrent : PlaceholderKind::ConditionCurrent;
    } else {
        ref.kind = agent ? PlaceholderKind::AgentHistory : PlaceholderKind::ConditionHistory;
        try {
            ref.history_turn = std::stoi(m[4]);
        } catch (const std::out_of_range&) {
            throw ParseError("history turn out of range in {" + s + "}");
        }
    }
    return ref;
}

std::vector<TemplateSegment> PromptTemplate::segments() const {
    std::vector<TemplateSegment> out;
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
        if (i > 0) out.push_back({SegmentKind::Placeholder, {}, placeholders[i - 1], i});
        out.push_back({SegmentKind::Prefix, prefixes[i], std::nullopt, i});
    }
    return out;
}

PromptTemplate parse_template(std::string_view text) {
    PromptTemplate t;
    std::string current;
    std::size_t i = 0;
    while (i < text.size()) {
        const char c = text[i];
        if (c == '}') throw ParseError("unbalanced '}' at offset " + std::to_string(i));
        if (c != '{') {
            current.push_back(c);
            ++i;
            continue;
        }
        const auto close = text.find_first_of("{}", i + 1);
        if (close == std::string_view::npos || text[close] != '}') {
            throw ParseError("unbalanced '{' at offset " + std::to_string(i));
        }
        t.placeholders.push_back(PlaceholderRef::parse(text.substr(i + 1, close - i - 1)));
        t.prefixes.push_back(std::move(current));
        current.clear();
        i = close + 1;
    }
    t.prefixes.push_back(std::move(current));
    return t;
}

} // namespace kvcomm

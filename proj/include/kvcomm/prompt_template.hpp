#pragma once

#include "kvcomm/geometry.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace kvcomm {

enum class PlaceholderKind { UserQuestion, AgentCurrent, AgentHistory, ConditionCurrent, ConditionHistory };

/// A named runtime slot. Names render as {user_question},
/// {agent_<id>_current}, {agent_<id>_history_<t>}, {condition_<id>_current}
/// and {condition_<id>_history_<t>}; ids are alphanumeric, t is an integer
/// (negative = relative to the current turn).
struct PlaceholderRef {
    PlaceholderKind kind = PlaceholderKind::UserQuestion;
    std::string source;   // agent id; empty for user_question
    int history_turn = 0; // history kinds only

    /// Name without braces; also the anchor-pool key.
    std::string name() const;

    /// Parses a name without braces; throws ParseError naming the token.
    static PlaceholderRef parse(std::string_view name);

    bool operator==(const PlaceholderRef&) const = default;
};

struct TemplateSegment {
    SegmentKind kind = SegmentKind::Prefix;
    std::string text;                    // prefix text
    std::optional<PlaceholderRef> ref;   // placeholder only
    std::size_t slot = 0;

    bool operator==(const TemplateSegment&) const = default;
};

/// An agent prompt in the alternating form [p0, phi1, p1, ..., phin, pn].
/// prefixes.size() == placeholders.size() + 1; prefixes may be empty strings
/// (adjacent placeholders, leading or trailing placeholder).
struct PromptTemplate {
    std::vector<std::string> prefixes;
    std::vector<PlaceholderRef> placeholders;

    std::size_t num_slots() const { return placeholders.size(); }
    std::vector<TemplateSegment> segments() const;
};

PromptTemplate parse_template(std::string_view text);

} // namespace kvcomm

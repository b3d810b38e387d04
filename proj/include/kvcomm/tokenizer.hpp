#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace kvcomm {

using TokenId = int;

struct TokenSequence {
    std::vector<TokenId> ids;
    std::optional<std::string> text;

    std::size_t size() const { return ids.size(); }
    bool operator==(const TokenSequence&) const = default;
};

/// BOS followed by one token per byte.
TokenSequence tokenize(std::string_view text);

/// Byte tokens without BOS, used for template segments and placeholder fills.
std::vector<TokenId> encode_bytes(std::string_view text);

/// Drops special tokens and maps the rest back to bytes.
std::string detokenize(const std::vector<TokenId>& ids);

} // namespace kvcomm

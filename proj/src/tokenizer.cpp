#include "kvcomm/tokenizer.hpp"

#include "kvcomm/config.hpp"

namespace kvcomm {

std::vector<TokenId> encode_bytes(std::string_view text) {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
    return ids;
}

TokenSequence tokenize(std::string_view text) {
    TokenSequence seq;
    seq.ids.reserve(text.size() + 1);
    seq.ids.push_back(kBosToken);
    for (unsigned char c : text) seq.ids.push_back(static_cast<TokenId>(c));
    seq.text = std::string(text);
    return seq;
}

std::string detokenize(const std::vector<TokenId>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

} // namespace kvcomm

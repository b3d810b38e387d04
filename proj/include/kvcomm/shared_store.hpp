#pragma once

#include "kvcomm/geometry.hpp"
#include "kvcomm/tokenizer.hpp"

#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

namespace kvcomm {

/// Three-level address: owner (agent id or "user_input"), kind ("question",
/// "response", "condition", "prefix"), and turn index (slot index for
/// prefixes).
struct StorePath {
    std::string owner;
    std::string kind;
    std::int64_t index = 0;

    auto operator<=>(const StorePath&) const = default;
};

inline constexpr const char* kUserInputOwner = "user_input";

struct StoreEntry {
    std::vector<TokenId> tokens;
    std::shared_ptr<const KVFragment> kv;
};

/// Write-once KV store shared by all agents. Writes are serialized
/// internally; reads of a written entry need no lock since entries never
/// change once stored.
class SharedKVStore {
public:
    const StoreEntry* get(const StorePath& path) const;
    bool contains(const StorePath& path) const { return get(path) != nullptr; }

    /// Stores an entry. Re-writing identical tokens is a no-op; writing
    /// different tokens to an existing path throws ContractViolation.
    const StoreEntry& put(const StorePath& path, std::vector<TokenId> tokens, std::shared_ptr<const KVFragment> kv);

    /// A fragment already stored under any path for these exact tokens.
    std::shared_ptr<const KVFragment> find_fragment(std::span<const TokenId> tokens) const;

    std::size_t size() const;

    /// Bytes of distinct fragments (paths sharing a fragment count it once).
    std::size_t bytes() const;

    const std::map<StorePath, StoreEntry>& entries() const { return entries_; }

private:
    mutable std::mutex mutex_;
    std::map<StorePath, StoreEntry> entries_;
    std::map<std::vector<TokenId>, std::shared_ptr<const KVFragment>> by_tokens_;
};

} // namespace kvcomm

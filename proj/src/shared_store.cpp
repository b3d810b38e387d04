#include "kvcomm/shared_store.hpp"

#include "kvcomm/error.hpp"

#include <set>

namespace kvcomm {

const StoreEntry* SharedKVStore::get(const StorePath& path) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(path);
    return it == entries_.end() ? nullptr : &it->second;
}

const StoreEntry& SharedKVStore::put(const StorePath& path, std::vector<TokenId> tokens,
                                     std::shared_ptr<const KVFragment> kv) {
    std::lock_guard lock(mutex_);
    if (auto it = entries_.find(path); it != entries_.end()) {
        if (it->second.tokens != tokens) {
            throw ContractViolation("store entry (" + path.owner + ", " + path.kind + ", " + std::to_string(path.index) +
                                    ") already written with different content");
        }
        return it->second;
    }
    by_tokens_.try_emplace(tokens, kv);
    auto [it, _] = entries_.emplace(path, StoreEntry{std::move(tokens), std::move(kv)});
    return it->second;
}

std::shared_ptr<const KVFragment> SharedKVStore::find_fragment(std::span<const TokenId> tokens) const {
    std::lock_guard lock(mutex_);
    auto it = by_tokens_.find(std::vector<TokenId>(tokens.begin(), tokens.end()));
    return it == by_tokens_.end() ? nullptr : it->second;
}

std::size_t SharedKVStore::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

std::size_t SharedKVStore::bytes() const {
    std::lock_guard lock(mutex_);
    std::set<const KVFragment*> seen;
    std::size_t total = 0;
    for (const auto& [_, e] : entries_) {
        if (e.kv && seen.insert(e.kv.get()).second) total += e.kv->bytes();
    }
    return total;
}

} // namespace kvcomm

#include "pioner/grid_cache.hpp"

namespace pioner {

GridCache::GridCache(std::size_t budget_bytes) : budget_(budget_bytes) {}

GridCache::GridPtr GridCache::find(const std::string& key) {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return nullptr;
    lru_.splice(lru_.begin(), lru_, it->second.lru);
    return it->second.grid;
}

GridCache::GridPtr GridCache::get_or_compute(const std::string& key, const std::function<PatchGrid()>& compute,
                                             bool* hit) {
    std::promise<GridPtr> promise;
    {
        std::unique_lock lock(mu_);
        if (auto it = entries_.find(key); it != entries_.end()) {
            lru_.splice(lru_.begin(), lru_, it->second.lru);
            if (hit) *hit = true;
            return it->second.grid;
        }
        if (auto it = inflight_.find(key); it != inflight_.end()) {
            auto fut = it->second;
            lock.unlock();
            if (hit) *hit = true;
            return fut.get();
        }
        inflight_.emplace(key, promise.get_future().share());
        ++computations_;
    }
    if (hit) *hit = false;
    GridPtr grid;
    try {
        grid = std::make_shared<const PatchGrid>(compute());
    } catch (...) {
        std::lock_guard lock(mu_);
        promise.set_exception(std::current_exception());
        inflight_.erase(key);
        throw;
    }
    std::lock_guard lock(mu_);
    insert_locked(key, grid);
    promise.set_value(grid);
    inflight_.erase(key);
    return grid;
}

void GridCache::insert_locked(const std::string& key, GridPtr grid) {
    const std::size_t size = grid->bytes();
    if (size > budget_) return;
    while (bytes_ + size > budget_ && !lru_.empty()) {
        auto victim = entries_.find(lru_.back());
        bytes_ -= victim->second.bytes;
        entries_.erase(victim);
        lru_.pop_back();
        ++evictions_;
    }
    lru_.push_front(key);
    entries_.emplace(key, Entry{std::move(grid), size, lru_.begin()});
    bytes_ += size;
}

std::size_t GridCache::bytes() const {
    std::lock_guard lock(mu_);
    return bytes_;
}
std::size_t GridCache::size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
}
std::size_t GridCache::computations() const {
    std::lock_guard lock(mu_);
    return computations_;
}
std::size_t GridCache::evictions() const {
    std::lock_guard lock(mu_);
    return evictions_;
}

} // namespace pioner

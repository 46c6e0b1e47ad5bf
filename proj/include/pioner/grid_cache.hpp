#pragma once

#include <cstddef>
#include <functional>
#include <future>
#include <limits>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>

#include "pioner/core.hpp"

namespace pioner {

// Thread-safe LRU cache of patch grids keyed by image id. Concurrent misses on
// one key share a single computation; total cached bytes never exceed the
// budget (a grid larger than the whole budget is returned but not kept).
class GridCache {
public:
    using GridPtr = std::shared_ptr<const PatchGrid>;

    explicit GridCache(std::size_t budget_bytes = std::numeric_limits<std::size_t>::max());

    // `hit` reports whether the grid came from the cache (or an in-flight
    // computation started by another caller) rather than this call's compute.
    GridPtr get_or_compute(const std::string& key, const std::function<PatchGrid()>& compute, bool* hit = nullptr);
    // Cached grid or nullptr; refreshes recency.
    GridPtr find(const std::string& key);

    std::size_t budget() const { return budget_; }
    std::size_t bytes() const;
    std::size_t size() const;
    std::size_t computations() const;
    std::size_t evictions() const;

private:
    struct Entry {
        GridPtr grid;
        std::size_t bytes;
        std::list<std::string>::iterator lru;
    };
    void insert_locked(const std::string& key, GridPtr grid);

    std::size_t budget_;
    mutable std::mutex mu_;
    std::list<std::string> lru_; // front = most recent
    std::unordered_map<std::string, Entry> entries_;
    std::unordered_map<std::string, std::shared_future<GridPtr>> inflight_;
    std::size_t bytes_ = 0;
    std::size_t computations_ = 0;
    std::size_t evictions_ = 0;
};

} // namespace pioner

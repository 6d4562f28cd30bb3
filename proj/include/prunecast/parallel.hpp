#pragma once

#include <cstddef>
#include <functional>

namespace prunecast {

/// Worker cap: PRUNECAST_THREADS when set to a positive integer, else the
/// hardware concurrency (at least 1).
std::size_t worker_threads();

/// Runs fn(i) for i in [0, n). Tasks must write disjoint outputs; callers
/// reduce results in index order so the outcome is independent of the
/// thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace prunecast

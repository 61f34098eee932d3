#pragma once

#include <cstddef>
#include <functional>

namespace ssdiff {

// Worker count: SSDIFF_THREADS if set, else hardware concurrency (at least 1).
[[nodiscard]] int worker_count();

// Runs fn(i) for i in [0, n) on up to worker_count() threads. Each index is
// processed exactly once; callers own per-index RNG streams so the result does
// not depend on scheduling. The first exception thrown by any task is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace ssdiff

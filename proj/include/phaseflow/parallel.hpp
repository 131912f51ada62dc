#pragma once

#include <cstddef>
#include <functional>

namespace phaseflow {

/// Worker count: PHASEFLOW_THREADS if set to a positive integer, otherwise
/// the machine's hardware concurrency (at least 1).
std::size_t worker_threads();

/// Calls fn(i) for every i in [0, n) on up to worker_threads() threads.
/// Callers write results into per-index slots, so the outcome never depends
/// on the thread count. The first exception thrown (lowest index) is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace phaseflow

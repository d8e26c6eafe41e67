#pragma once

#include <cstddef>
#include <functional>

namespace diffreg {

/// Worker count: DIFFREG_THREADS when set and positive, otherwise the
/// hardware concurrency (at least 1).
int worker_count();

/// Runs body(i) for i in [0, n). Each index is visited exactly once; callers
/// write results into per-index slots so the outcome is independent of the
/// schedule.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace diffreg

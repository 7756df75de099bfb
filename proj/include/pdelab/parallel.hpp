#pragma once

#include <cstddef>
#include <functional>

namespace pdelab {

/// Worker count from an explicit request, falling back to PDE_LAB_THREADS,
/// then 1. Always >= 1.
int resolve_threads(int requested);

/// Runs task(i) for i in [0, n) on up to `threads` workers. Tasks must write
/// to disjoint outputs; any ordering-sensitive reduction happens afterwards.
/// The first exception thrown by a task is rethrown on the calling thread.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& task);

}  // namespace pdelab

#pragma once

#include <cstddef>
#include <functional>

namespace dlbl {

// Worker count: DLBL_THREADS if set and positive, else the hardware
// concurrency (at least 1).
std::size_t worker_count();

// Runs body(worker, index) for every index in [0, count) across up to
// `workers` threads. Each index is visited exactly once; the worker id lets
// callers keep per-thread state (network clones, scratch buffers).
// Exceptions from any worker are rethrown on the calling thread.
void parallel_for(std::size_t count, std::size_t workers,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace dlbl

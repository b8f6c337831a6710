#pragma once

#include <functional>

namespace atcon {

/// Worker count: ATCON_THREADS when set to a positive integer, otherwise the
/// hardware concurrency.
int worker_count();

/// Runs fn(0..n-1) on up to worker_count() threads. Each index is handled
/// exactly once; the first exception is rethrown after all workers finish.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace atcon

#pragma once

#include <cstddef>
#include <functional>

namespace mkdiff {

/// Worker count used by parallel loops. Defaults to MKDIFF_THREADS, else
/// hardware concurrency.
int thread_count();
void set_thread_count(int n);

/// When set, parallel loops run sequentially in index order.
bool deterministic_mode();
void set_deterministic_mode(bool on);

/// Runs body(begin, end) over contiguous chunks of [0, n). Chunks never
/// overlap, so bodies writing disjoint rows need no synchronization.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t min_chunk = 64);

}  // namespace mkdiff

#pragma once

#include <cstddef>
#include <functional>

namespace pqnet {

/// Worker count from PQNET_THREADS (0 or unset = hardware concurrency).
std::size_t thread_count();

/// Run body(begin, end) over contiguous chunks of [0, n). Chunks are
/// disjoint, so bodies that write only their own range stay deterministic.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace pqnet

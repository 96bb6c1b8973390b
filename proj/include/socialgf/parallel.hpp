#pragma once

#include <cstddef>
#include <functional>

namespace socialgf {

// Worker count from SOCIALGF_WORKERS, falling back to hardware concurrency.
std::size_t worker_count();

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks; callers must
// write results into per-index slots so that output never depends on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace socialgf

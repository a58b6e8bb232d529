#pragma once

#include <cstdint>
#include <functional>

namespace unips {

// Worker count for data-parallel loops: min(hardware, UNIPS_THREADS if set).
int worker_count();

// Runs fn(i) for i in [0, n). Work items must write disjoint outputs; the
// partition is static so results do not depend on scheduling.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace unips

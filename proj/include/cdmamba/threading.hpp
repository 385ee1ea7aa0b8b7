#pragma once

#include <cstddef>
#include <functional>

namespace cdmamba {

// Worker cap: min(hardware_concurrency, CDMAMBA_THREADS if set). At least 1.
std::size_t thread_budget();

// Runs body(begin, end) over a static partition of [0, n). Each task owns a
// contiguous, disjoint index range, so results do not depend on scheduling.
// Falls back to a direct call when n is small or only one worker is available.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t grain = 1);

}  // namespace cdmamba

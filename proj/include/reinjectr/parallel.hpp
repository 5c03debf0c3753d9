#pragma once

#include <cstddef>
#include <functional>

namespace reinjectr {

// Runs fn(i) for i in [0, count). Work items must be independent; results
// are required to match a sequential run bit for bit, so fn may only write
// to its own output slot. Thread count is capped by REINJECTR_THREADS.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

std::size_t effective_thread_count();

}  // namespace reinjectr

#pragma once

#include <cstddef>
#include <functional>

namespace wsikit::parallel {

// Process-wide cap for data-parallel loops. 1 = serial (the default).
void set_max_threads(std::size_t n);
std::size_t max_threads();

// Runs fn(0), ..., fn(n-1), possibly across threads. Each index must write
// only its own output slot, so results do not depend on the thread count.
void for_each_index(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace wsikit::parallel

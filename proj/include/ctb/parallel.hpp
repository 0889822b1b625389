#pragma once

#include <cstddef>
#include <functional>

namespace ctb {

// Process-wide worker count used by parallel_for. Results never depend on it:
// every parallel loop writes disjoint slots and reductions run afterwards in
// index order.
void set_thread_count(int n);
int thread_count();

// Calls body(begin, end) on contiguous static chunks of [0, n).
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace ctb

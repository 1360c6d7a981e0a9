#pragma once

#include <cstddef>
#include <functional>

namespace volab {

// Worker cap: VOLAB_THREADS if set, otherwise hardware concurrency.
std::size_t max_threads();
void set_max_threads(std::size_t n);

// Runs body(i) for i in [0, n). Each index is handled by exactly one worker,
// so results are identical to the serial loop as long as body(i) only writes
// to slots owned by i.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace volab

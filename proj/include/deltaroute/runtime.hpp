#pragma once

#include <cstddef>

namespace deltaroute {

/// Process-wide tuning for training workloads: keeps large activation buffers
/// in the heap instead of returning them to the OS after every step, which
/// otherwise costs a page fault per touched page on the next allocation.
void tune_allocator();

/// Parallelism cap from DELTAROUTE_THREADS, 1 when unset. Throws ConfigError
/// on anything but a positive integer.
std::size_t thread_cap();

/// Threads the BLAS backend may use inside a single call.
void set_blas_threads(std::size_t n);

}  // namespace deltaroute

#include "deltaroute/runtime.hpp"

#include <cblas.h>
#include <malloc.h>

#include <charconv>
#include <cstdlib>
#include <string>

#include "deltaroute/errors.hpp"

namespace deltaroute {

void tune_allocator() {
#ifdef M_MMAP_THRESHOLD
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

std::size_t thread_cap() {
  const char* raw = std::getenv("DELTAROUTE_THREADS");
  if (!raw || !*raw) return 1;
  const std::string text(raw);
  std::size_t value = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || end != text.data() + text.size() || value == 0) {
    throw ConfigError("DELTAROUTE_THREADS: expected a positive integer, got '" + text + "'");
  }
  return value;
}

void set_blas_threads(std::size_t n) { openblas_set_num_threads(static_cast<int>(n)); }

}  // namespace deltaroute

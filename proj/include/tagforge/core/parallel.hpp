#pragma once

#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace tagforge {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
/// written to disjoint, index-addressed slots; the outcome is then identical
/// to the sequential order regardless of worker count. The first exception
/// thrown by any worker is rethrown after all threads join.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t nthreads = std::min<std::size_t>(std::size_t(workers), n);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errs(nthreads);
  for (std::size_t t = 0; t < nthreads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += nthreads) fn(i);
      } catch (...) {
        errs[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace tagforge

#pragma once

#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace mega {

/// Runs body(i) for i in [0, n) on up to `threads` threads, chunked
/// contiguously. The first exception thrown is rethrown on the caller.
inline void parallel_for(int n, int threads, const std::function<void(int)>& body) {
  const int workers = std::max(1, std::min({threads, n, static_cast<int>(std::max(1u, std::thread::hardware_concurrency()))}));
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w * n / workers; i < (w + 1) * n / workers; ++i) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace mega

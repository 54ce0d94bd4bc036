#pragma once

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "potinv/types.hpp"

namespace potinv {

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Run body(begin, end) over fixed-size chunks of [0, n).  Chunk boundaries
/// do not depend on the thread count, so any computation that is sequential
/// only within a chunk gives identical results for any number of threads.
template <typename Body>
void parallel_chunks(Index n, Index chunk_size, int threads, Body&& body) {
  if (n <= 0) return;
  const Index n_chunks = (n + chunk_size - 1) / chunk_size;
  threads = resolve_threads(threads);
  if (threads <= 1 || n_chunks <= 1) {
    for (Index c = 0; c < n_chunks; ++c)
      body(c * chunk_size, std::min(n, (c + 1) * chunk_size));
    return;
  }
  std::atomic<Index> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const Index c = next.fetch_add(1);
      if (c >= n_chunks) return;
      try {
        body(c * chunk_size, std::min(n, (c + 1) * chunk_size));
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int n_workers = std::min<Index>(threads, n_chunks);
  pool.reserve(n_workers);
  for (int t = 0; t < n_workers; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace potinv

#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace gplvm {

/// Runs fn(chunk_index, begin, end) over fixed-size chunks of [0, count).
/// Chunk boundaries depend only on `count` and `chunk`, never on the thread
/// count, so per-chunk partial results reduced in chunk order are
/// bit-identical for any `threads`.
template <typename Fn>
void parallel_chunks(std::size_t count, std::size_t chunk, unsigned threads,
                     Fn &&fn) {
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t n_chunks = (count + chunk - 1) / chunk;
  auto run = [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    fn(c, begin, std::min(count, begin + chunk));
  };
  if (threads <= 1 || n_chunks <= 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) {
      run(c);
    }
    return;
  }
  const unsigned workers =
      static_cast<unsigned>(std::min<std::size_t>(threads, n_chunks));
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < n_chunks; c += workers) {
          run(c);
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) {
          failure = std::current_exception();
        }
      }
    });
  }
  for (auto &t : pool) {
    t.join();
  }
  if (failure) {
    std::rethrow_exception(failure);
  }
}

} // namespace gplvm

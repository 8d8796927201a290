#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <utility>
#include <vector>

namespace patchdet {

inline int worker_count() {
  if (const char* env = std::getenv("PATCHDET_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Contiguous [begin, end) chunks, at most `workers` of them, never empty.
inline std::vector<std::pair<std::size_t, std::size_t>> split_range(std::size_t n, int workers) {
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  if (n == 0) return chunks;
  const std::size_t w = static_cast<std::size_t>(workers) < n ? static_cast<std::size_t>(workers) : n;
  const std::size_t base = n / w, extra = n % w;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < w; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    chunks.emplace_back(begin, begin + len);
    begin += len;
  }
  return chunks;
}

// Runs fn(chunk_index, begin, end) on static contiguous chunks. Results that
// depend on summation order must be reduced by the caller in chunk order so
// the outcome does not depend on thread scheduling.
inline void parallel_chunks(std::size_t n,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& fn,
                            int workers = worker_count()) {
  const auto chunks = split_range(n, workers);
  if (chunks.empty()) return;
  if (chunks.size() == 1) {
    fn(0, chunks[0].first, chunks[0].second);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(chunks.size());
  for (std::size_t i = 0; i < chunks.size(); ++i)
    threads.emplace_back([&, i] { fn(i, chunks[i].first, chunks[i].second); });
  for (auto& t : threads) t.join();
}

// Element-wise convenience wrapper.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                         int workers = worker_count()) {
  parallel_chunks(n, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) fn(i);
  }, workers);
}

}  // namespace patchdet

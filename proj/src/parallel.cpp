#include "artsurf/parallel.hpp"

#include <atomic>
#include <thread>
#include <vector>

namespace artsurf {

namespace {
int g_workers = static_cast<int>(std::thread::hardware_concurrency());
}

void set_worker_count(int n) { g_workers = n < 1 ? 1 : n; }
int worker_count() { return g_workers < 1 ? 1 : g_workers; }

void parallel_for(std::size_t n_jobs, const std::function<void(std::size_t)>& fn) {
  if (n_jobs == 0) return;
  int workers = worker_count();
  if (workers <= 1 || n_jobs == 1) {
    for (std::size_t i = 0; i < n_jobs; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto body = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n_jobs) break;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  int n_threads = static_cast<int>(std::min<std::size_t>(workers, n_jobs));
  pool.reserve(n_threads - 1);
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(body);
  body();
  for (auto& th : pool) th.join();
}

}  // namespace artsurf

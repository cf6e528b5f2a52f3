#include "avatar/parallel.hpp"

#include <atomic>

namespace av {

namespace {
std::atomic<int> g_threads{0};
}

void set_thread_count(int n) { g_threads = std::max(n, 0); }

int thread_count() {
  const int n = g_threads.load();
  if (n > 0) return n;
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

}  // namespace av

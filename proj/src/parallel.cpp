#include "mixsearch/parallel.hpp"

#include <atomic>

#include "mixsearch/error.hpp"

namespace mixsearch {

namespace {
std::atomic<int> g_threads{1};
}

void set_num_threads(int n) {
  if (n < 1) throw Error(Errc::InvalidConfig, "thread count must be at least 1");
  g_threads = n;
}

int num_threads() { return g_threads; }

}  // namespace mixsearch
